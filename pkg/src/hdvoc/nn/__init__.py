from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from .epsnet import EpsilonNet, EpsilonNetConfig, receptive_field, step_embedding
from .optim import DEFAULT_LEARNING_RATE, TrainState, adam_step

__all__ = [
    "EpsilonNet",
    "EpsilonNetConfig",
    "DEFAULT_LEARNING_RATE",
    "TrainState",
    "adam_step",
    "checkpoint_bytes",
    "load_checkpoint",
    "receptive_field",
    "save_checkpoint",
    "step_embedding",
]
