"""Dual-input convolutional classifier.

Topology: a stack of conv3x3 -> ReLU -> maxpool2 blocks (the backbone),
flatten, concatenation of the 4-value auxiliary input, then exactly two
dense->ReLU->dropout couples and a softmax output layer.  With
freeze_backbone set, the conv tensors are excluded from the gradient set
(and from updates); everything downstream of the flatten stays
trainable.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import layers


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int
    input_hw: int = 224
    in_channels: int = 3
    conv_filters: tuple[int, ...] = (8, 16, 32)
    dense_sizes: tuple[int, int] = (256, 128)
    dropout_rate: float = 0.5
    aux_dim: int = 4
    freeze_backbone: bool = False
    dtype: type = np.float32

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes {self.num_classes} below 2")
        if len(self.dense_sizes) != 2:
            raise ValueError("exactly two dense sizes required")
        if self.input_hw % (2 ** len(self.conv_filters)) != 0:
            raise ValueError(
                f"input {self.input_hw} not divisible by pooling factor "
                f"{2 ** len(self.conv_filters)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def feature_hw(self) -> int:
        return self.input_hw // (2 ** len(self.conv_filters))

    @property
    def feature_dim(self) -> int:
        return self.feature_hw ** 2 * self.conv_filters[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c = self.in_channels
        for i, f in enumerate(self.conv_filters):
            shapes[f"conv{i}/W"] = (3, 3, c, f)
            shapes[f"conv{i}/b"] = (f,)
            c = f
        d_in = self.feature_dim + self.aux_dim
        for i, d_out in enumerate(self.dense_sizes):
            shapes[f"dense{i}/W"] = (d_in, d_out)
            shapes[f"dense{i}/b"] = (d_out,)
            d_in = d_out
        shapes["out/W"] = (d_in, self.num_classes)
        shapes["out/b"] = (self.num_classes,)
        return shapes

    def backbone_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.param_shapes() if n.startswith("conv"))

    def trainable_names(self) -> tuple[str, ...]:
        if self.freeze_backbone:
            return tuple(n for n in self.param_shapes() if not n.startswith("conv"))
        return tuple(self.param_shapes())

    def config_hash(self) -> int:
        text = repr((self.num_classes, self.input_hw, self.in_channels,
                     self.conv_filters, self.dense_sizes, self.dropout_rate,
                     self.aux_dim, np.dtype(self.dtype).str))
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def init_params(config: NetworkConfig, seed: int) -> dict[str, np.ndarray]:
    """He-uniform weights, zero biases, all from one seeded generator."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("/b"):
            params[name] = np.zeros(shape, dtype=config.dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(config.dtype)
    return params


def check_shapes(params: dict[str, np.ndarray], config: NetworkConfig) -> None:
    shapes = config.param_shapes()
    for name, shape in shapes.items():
        if name not in params:
            raise ShapeMismatch(f"missing parameter {name}")
        if tuple(params[name].shape) != shape:
            raise ShapeMismatch(
                f"{name}: expected {shape}, got {tuple(params[name].shape)}")


@dataclass
class Model:
    """Parameter set plus the class-index <-> sonotype-id mapping."""
    config: NetworkConfig
    params: dict[str, np.ndarray]
    classes: np.ndarray | None = None   # sonotype id per class index

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def _prepare_inputs(config: NetworkConfig, images: np.ndarray, aux: np.ndarray):
    images = np.asarray(images)
    aux = np.asarray(aux, dtype=config.dtype)
    single = images.ndim == 3
    if single:
        images = images[None]
        aux = aux[None]
    expected = (config.input_hw, config.input_hw, config.in_channels)
    if images.shape[1:] != expected:
        raise ShapeMismatch(f"image shape {images.shape[1:]}, config wants {expected}")
    if aux.shape[1:] != (config.aux_dim,):
        raise ShapeMismatch(f"aux shape {aux.shape[1:]}, config wants ({config.aux_dim},)")
    x = images.astype(config.dtype) / config.dtype(255)
    return x, aux, single


def backbone_forward(params: dict, config: NetworkConfig, x: np.ndarray,
                     keep_cache: bool = True):
    """Conv blocks over pre-scaled input; returns flattened features."""
    caches = []
    for i in range(len(config.conv_filters)):
        x, c_conv = layers.conv3x3_forward(x, params[f"conv{i}/W"], params[f"conv{i}/b"])
        x, c_relu = layers.relu_forward(x)
        x, c_pool = layers.maxpool2_forward(x)
        if keep_cache:
            caches.append((c_conv, c_relu, c_pool))
    return x.reshape(x.shape[0], -1), caches


def head_forward(params: dict, config: NetworkConfig, feats: np.ndarray,
                 aux: np.ndarray, train_mode: bool = False,
                 rng: np.random.Generator | None = None):
    z = np.concatenate([feats, aux], axis=1)
    cache = {"concat_dim": feats.shape[1]}
    h = z
    for i in range(2):
        h, cache[f"dense{i}"] = layers.dense_forward(
            h, params[f"dense{i}/W"], params[f"dense{i}/b"])
        h, cache[f"relu{i}"] = layers.relu_forward(h)
        h, cache[f"drop{i}"] = layers.dropout_forward(
            h, config.dropout_rate, rng, train_mode)
    logits, cache["out"] = layers.dense_forward(h, params["out/W"], params["out/b"])
    return layers.softmax(logits), cache


def head_backward(params: dict, config: NetworkConfig, probs: np.ndarray,
                  onehot: np.ndarray, cache: dict, need_dfeat: bool):
    grads = {}
    d = layers.softmax_xent_backward(probs, onehot)
    d, grads["out/W"], grads["out/b"] = layers.dense_backward(d, cache["out"])
    for i in (1, 0):
        d = layers.dropout_backward(d, cache[f"drop{i}"])
        d = layers.relu_backward(d, cache[f"relu{i}"])
        d, grads[f"dense{i}/W"], grads[f"dense{i}/b"] = layers.dense_backward(
            d, cache[f"dense{i}"])
    dfeat = d[:, :cache["concat_dim"]] if need_dfeat else None
    return grads, dfeat


def backbone_backward(params: dict, config: NetworkConfig, dfeat: np.ndarray,
                      caches: list, feature_shape: tuple):
    grads = {}
    d = dfeat.reshape(feature_shape)
    for i in reversed(range(len(config.conv_filters))):
        c_conv, c_relu, c_pool = caches[i]
        d = layers.maxpool2_backward(d, c_pool)
        d = layers.relu_backward(d, c_relu)
        d, grads[f"conv{i}/W"], grads[f"conv{i}/b"] = layers.conv3x3_backward(d, c_conv)
    return grads


def forward(params: dict, config: NetworkConfig, images: np.ndarray, aux: np.ndarray,
            train_mode: bool = False, rng: np.random.Generator | None = None,
            keep_cache: bool = False):
    """Class probabilities for images (uint8 [0,255]) and aux vectors.

    Accepts a single sample (H, W, C) or a batch (N, H, W, C).  Dropout
    is active only in train_mode.  With keep_cache=True the returned
    cache feeds backward().
    """
    check_shapes(params, config)
    x, aux_b, single = _prepare_inputs(config, images, aux)
    feats, conv_caches = backbone_forward(params, config, x, keep_cache=keep_cache)
    probs, head_cache = head_forward(params, config, feats, aux_b,
                                     train_mode=train_mode, rng=rng)
    cache = None
    if keep_cache:
        n = x.shape[0]
        fshape = (n, config.feature_hw, config.feature_hw, config.conv_filters[-1])
        cache = {"conv": conv_caches, "head": head_cache, "feature_shape": fshape}
    return (probs[0] if single else probs), cache
