from .network import Model, NetworkConfig, ShapeMismatch, forward, init_params
from .train import (AdamState, CorpusTooSmall, EarlyStopper, ModelCheckpoint,
                    TrainConfig, backward, evaluate_probs, load_checkpoint, loss,
                    pretext_pretrain, save_checkpoint, train)

__all__ = [
    "AdamState", "CorpusTooSmall", "EarlyStopper", "Model", "ModelCheckpoint",
    "NetworkConfig", "ShapeMismatch", "TrainConfig", "backward", "evaluate_probs",
    "forward", "init_params", "load_checkpoint", "loss", "pretext_pretrain",
    "save_checkpoint", "train",
]
