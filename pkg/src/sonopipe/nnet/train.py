"""Training loop: Adam, early stopping on validation loss, checkpoints.

Runs are bit-reproducible for a fixed TrainConfig seed: shuffling and
dropout draw from one generator, batches are fixed-size slices of the
permutation, and Adam updates iterate parameters in sorted name order.

When the backbone is frozen its outputs cannot change, so the conv
features of the train/val sets are computed once up front and the epoch
loop touches only the dense head.  This is exactly equivalent to running
the full network every epoch (the backbone has no dropout) and is what
makes frozen-transfer runs cheap.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .. import container
from ..dataset import EmptySplit, SonotypeDataset
from . import layers
from .network import (Model, NetworkConfig, backbone_backward, backbone_forward,
                      check_shapes, forward, head_backward, head_forward,
                      init_params, _prepare_inputs)


class TrainError(ValueError):
    pass


class CorpusTooSmall(TrainError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience {self.patience} below 1")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs {self.max_epochs} below 1")


class EarlyStopper:
    """Patience rule: stop after `patience` consecutive epochs without a
    strictly lower validation loss; remembers the best epoch seen."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience {patience} below 1")
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.epochs_since_best = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Feed one epoch's validation loss; returns (improved, should_stop)."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.epochs_since_best = 0
            return True, False
        self.epochs_since_best += 1
        return False, self.epochs_since_best >= self.patience


def simulate_early_stopping(val_losses, patience: int) -> tuple[int, int]:
    """(stop_epoch, best_epoch) the rule produces on a scripted loss sequence.

    Epochs are 1-based; stop_epoch is len(val_losses) when the sequence
    ends before patience runs out.
    """
    stopper = EarlyStopper(patience)
    for epoch, loss_value in enumerate(val_losses, start=1):
        _, stop = stopper.update(epoch, loss_value)
        if stop:
            return epoch, stopper.best_epoch
    return len(val_losses), stopper.best_epoch


class AdamState:
    def __init__(self, names, params: dict, cfg: TrainConfig):
        self.names = tuple(sorted(names))
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0
        self.cfg = cfg

    def step(self, params: dict, grads: dict) -> None:
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = cfg.beta1 * self.m[n] + (1 - cfg.beta1) * g
            self.v[n] = cfg.beta2 * self.v[n] + (1 - cfg.beta2) * (g * g)
            m_hat = self.m[n] / b1t
            v_hat = self.v[n] / b2t
            params[n] -= (cfg.learning_rate * m_hat /
                          (np.sqrt(v_hat) + cfg.eps)).astype(params[n].dtype)

    def snapshot(self) -> dict:
        return {"m": {n: a.copy() for n, a in self.m.items()},
                "v": {n: a.copy() for n, a in self.v.items()}, "t": self.t}


@dataclass
class ModelCheckpoint:
    params: dict[str, np.ndarray]       # parameters at the best epoch
    epoch: int                          # 1-based epoch of the best validation loss
    best_val_loss: float
    rng_state: dict
    config_hash: int
    classes: np.ndarray
    adam: dict | None = None            # optimizer snapshot at the best epoch


def loss(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Categorical cross-entropy; accepts one sample or a batch."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    onehot = np.atleast_2d(np.asarray(onehot, dtype=np.float64))
    return layers.cross_entropy(probs, onehot)


def backward(params: dict, config: NetworkConfig, cache: dict, probs: np.ndarray,
             onehot: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable tensor; frozen backbone excluded."""
    head_grads, dfeat = head_backward(params, config, probs, onehot, cache["head"],
                                      need_dfeat=not config.freeze_backbone)
    if config.freeze_backbone:
        return head_grads
    conv_grads = backbone_backward(params, config, dfeat, cache["conv"],
                                   cache["feature_shape"])
    return {**head_grads, **conv_grads}


def _stack(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    aux = np.stack([s.aux for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, aux, labels


def _onehot(y_idx: np.ndarray, k: int, dtype) -> np.ndarray:
    return np.eye(k, dtype=dtype)[y_idx]


def _batched_backbone(params, config, images, aux, batch_size: int):
    """Frozen-path feature extraction, batched to bound memory."""
    feats = []
    for start in range(0, len(images), batch_size):
        x, _, _ = _prepare_inputs(config, images[start:start + batch_size],
                                  aux[start:start + batch_size])
        f, _ = backbone_forward(params, config, x, keep_cache=False)
        feats.append(f)
    return np.concatenate(feats, axis=0)


def _val_loss(params, config, images, aux, onehot, batch_size: int,
              frozen_feats: np.ndarray | None = None) -> float:
    total = 0.0
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        if frozen_feats is not None:
            probs, _ = head_forward(params, config, frozen_feats[sl], aux[sl])
        else:
            probs, _ = forward(params, config, images[sl], aux[sl])
        total += layers.cross_entropy(probs, onehot[sl]) * (len(onehot[sl]))
    return total / len(images)


def train(model: Model, dataset: SonotypeDataset, cfg: TrainConfig,
          ) -> tuple[ModelCheckpoint, list[dict]]:
    """Fit on the train split, early-stop on the val split.

    Returns the checkpoint with the lowest validation loss ever observed
    plus a per-epoch history of train/val losses.
    """
    config = model.config
    check_shapes(model.params, config)
    train_samples = dataset.subset("train")
    val_samples = dataset.subset("val")
    if not train_samples or not val_samples:
        raise EmptySplit("train and val splits must both be non-empty")

    classes = np.unique([s.label for s in train_samples + val_samples])
    if len(classes) != config.num_classes:
        raise TrainError(f"dataset has {len(classes)} classes, "
                         f"config expects {config.num_classes}")
    model.classes = classes

    tr_images, tr_aux_raw, tr_labels = _stack(train_samples)
    va_images, va_aux_raw, va_labels = _stack(val_samples)
    tr_onehot = _onehot(np.searchsorted(classes, tr_labels), len(classes), config.dtype)
    va_onehot = _onehot(np.searchsorted(classes, va_labels), len(classes), config.dtype)
    tr_aux = tr_aux_raw.astype(config.dtype)
    va_aux = va_aux_raw.astype(config.dtype)

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    params = model.params
    adam = AdamState(config.trainable_names(), params, cfg)
    stopper = EarlyStopper(cfg.patience)

    frozen_tr = frozen_va = None
    if config.freeze_backbone:
        frozen_tr = _batched_backbone(params, config, tr_images, tr_aux, cfg.batch_size)
        frozen_va = _batched_backbone(params, config, va_images, va_aux, cfg.batch_size)

    best = {"params": {k: v.copy() for k, v in params.items()},
            "adam": adam.snapshot(), "epoch": 0}
    history = []
    n_train = len(train_samples)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if config.freeze_backbone:
                probs, cache = head_forward(params, config, frozen_tr[idx],
                                            tr_aux[idx], train_mode=True, rng=rng)
                grads, _ = head_backward(params, config, probs, tr_onehot[idx],
                                         cache, need_dfeat=False)
            else:
                probs, cache = forward(params, config, tr_images[idx], tr_aux[idx],
                                       train_mode=True, rng=rng, keep_cache=True)
                grads = backward(params, config, cache, probs, tr_onehot[idx])
            epoch_loss += layers.cross_entropy(probs, tr_onehot[idx]) * len(idx)
            adam.step(params, grads)

        val = _val_loss(params, config, va_images, va_aux, va_onehot,
                        cfg.batch_size, frozen_va)
        history.append({"epoch": epoch, "train_loss": epoch_loss / n_train,
                        "val_loss": val})
        improved, stop = stopper.update(epoch, val)
        if improved:
            best = {"params": {k: v.copy() for k, v in params.items()},
                    "adam": adam.snapshot(), "epoch": epoch}
        if stop:
            break

    checkpoint = ModelCheckpoint(
        params=best["params"], epoch=best["epoch"],
        best_val_loss=float(stopper.best_loss),
        rng_state=rng.bit_generator.state, config_hash=config.config_hash(),
        classes=classes, adam=best["adam"])
    model.params = {k: v.copy() for k, v in checkpoint.params.items()}
    return checkpoint, history


def evaluate_probs(model: Model, samples, batch_size: int = 64) -> np.ndarray:
    """Inference-mode class probabilities for a list of encoded samples."""
    images, aux, _ = _stack(samples)
    out = []
    for start in range(0, len(samples), batch_size):
        probs, _ = forward(model.params, model.config, images[start:start + batch_size],
                           aux[start:start + batch_size].astype(model.config.dtype))
        out.append(np.atleast_2d(probs))
    return np.concatenate(out, axis=0)


def pretext_pretrain(config: NetworkConfig, images: np.ndarray, labels: np.ndarray,
                     seed: int, epochs: int = 8, learning_rate: float = 1e-3,
                     batch_size: int = 32) -> dict[str, np.ndarray]:
    """Train the backbone on a disjoint classification task; return conv tensors.

    The pretext head (small dense couples) is discarded; the returned
    tensors load directly as a frozen backbone.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise CorpusTooSmall(f"pretext corpus has {len(classes)} classes, need >= 2")
    if len(images) < 2 * len(classes):
        raise CorpusTooSmall("pretext corpus needs at least 2 samples per class")
    pre_cfg = NetworkConfig(
        num_classes=len(classes), input_hw=config.input_hw,
        in_channels=config.in_channels, conv_filters=config.conv_filters,
        dense_sizes=(64, 32), dropout_rate=0.25, aux_dim=config.aux_dim,
        freeze_backbone=False, dtype=config.dtype)
    params = init_params(pre_cfg, seed)
    cfg = TrainConfig(learning_rate=learning_rate, batch_size=batch_size,
                      max_epochs=epochs, patience=max(1, epochs), seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    onehot = _onehot(np.searchsorted(classes, labels), len(classes), pre_cfg.dtype)
    aux = np.zeros((len(images), pre_cfg.aux_dim), dtype=pre_cfg.dtype)
    adam = AdamState(pre_cfg.trainable_names(), params, cfg)
    for _ in range(epochs):
        perm = rng.permutation(len(images))
        for start in range(0, len(images), batch_size):
            idx = perm[start:start + batch_size]
            probs, cache = forward(params, pre_cfg, images[idx], aux[idx],
                                   train_mode=True, rng=rng, keep_cache=True)
            grads = backward(params, pre_cfg, cache, probs, onehot[idx])
            adam.step(params, grads)
    return {n: params[n] for n in pre_cfg.backbone_names()}


_RNG_KEYS = ("state", "inc", "has_uint32", "uinteger")


def _rng_state_to_array(state: dict) -> np.ndarray:
    s = state["state"]
    return np.array([s["state"] & (2**64 - 1), s["state"] >> 64,
                     s["inc"] & (2**64 - 1), s["inc"] >> 64,
                     state.get("has_uint32", 0), state.get("uinteger", 0)],
                    dtype=np.uint64)


def _rng_state_from_array(arr: np.ndarray) -> dict:
    return {"bit_generator": "PCG64",
            "state": {"state": int(arr[0]) | (int(arr[1]) << 64),
                      "inc": int(arr[2]) | (int(arr[3]) << 64)},
            "has_uint32": int(arr[4]), "uinteger": int(arr[5])}


def save_checkpoint(checkpoint: ModelCheckpoint, config: NetworkConfig) -> bytes:
    """Serialize a checkpoint in the dataset container format."""
    entries: dict[str, np.ndarray] = {}
    for name in sorted(checkpoint.params):
        entries[f"param/{name}"] = checkpoint.params[name]
    if checkpoint.adam is not None:
        for name in sorted(checkpoint.adam["m"]):
            entries[f"state/adam_m/{name}"] = checkpoint.adam["m"][name]
            entries[f"state/adam_v/{name}"] = checkpoint.adam["v"][name]
        entries["state/adam_t"] = np.array([checkpoint.adam["t"]], dtype=np.int64)
    entries["meta/epoch"] = np.array([checkpoint.epoch], dtype=np.int64)
    entries["meta/best_val_loss"] = np.array([checkpoint.best_val_loss], dtype=np.float64)
    entries["meta/config_hash"] = np.array([checkpoint.config_hash], dtype=np.uint64)
    entries["meta/rng_state"] = _rng_state_to_array(checkpoint.rng_state)
    entries["meta/classes"] = np.asarray(checkpoint.classes, dtype=np.int64)
    cfg_json = json.dumps({
        "num_classes": config.num_classes, "input_hw": config.input_hw,
        "in_channels": config.in_channels, "conv_filters": list(config.conv_filters),
        "dense_sizes": list(config.dense_sizes), "dropout_rate": config.dropout_rate,
        "aux_dim": config.aux_dim, "freeze_backbone": config.freeze_backbone,
        "dtype": np.dtype(config.dtype).name})
    entries["meta/config_json"] = np.frombuffer(cfg_json.encode(), dtype=np.uint8)
    return container.write_tensors(entries)


def load_checkpoint(data: bytes) -> tuple[Model, ModelCheckpoint]:
    entries = container.read_tensors(data)
    cfg_dict = json.loads(bytes(entries["meta/config_json"]).decode())
    config = NetworkConfig(
        num_classes=cfg_dict["num_classes"], input_hw=cfg_dict["input_hw"],
        in_channels=cfg_dict["in_channels"],
        conv_filters=tuple(cfg_dict["conv_filters"]),
        dense_sizes=tuple(cfg_dict["dense_sizes"]),
        dropout_rate=cfg_dict["dropout_rate"], aux_dim=cfg_dict["aux_dim"],
        freeze_backbone=cfg_dict["freeze_backbone"],
        dtype=np.dtype(cfg_dict["dtype"]).type)
    params = {name[len("param/"):]: arr for name, arr in entries.items()
              if name.startswith("param/")}
    check_shapes(params, config)
    adam = None
    if "state/adam_t" in entries:
        adam = {"m": {}, "v": {}, "t": int(entries["state/adam_t"][0])}
        for name, arr in entries.items():
            if name.startswith("state/adam_m/"):
                adam["m"][name[len("state/adam_m/"):]] = arr
            elif name.startswith("state/adam_v/"):
                adam["v"][name[len("state/adam_v/"):]] = arr
    checkpoint = ModelCheckpoint(
        params=params, epoch=int(entries["meta/epoch"][0]),
        best_val_loss=float(entries["meta/best_val_loss"][0]),
        rng_state=_rng_state_from_array(entries["meta/rng_state"]),
        config_hash=int(entries["meta/config_hash"][0]),
        classes=entries["meta/classes"], adam=adam)
    model = Model(config=config, params={k: v.copy() for k, v in params.items()},
                  classes=checkpoint.classes)
    return model, checkpoint
