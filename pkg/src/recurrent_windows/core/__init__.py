"""Core numeric kernel - float64 arrays, gradient tape, Adam, RNG, checkpoints."""

from .optim import Adam, adam_update, clip_by_global_norm
from .rng import Rng
from .serialization import load_checkpoint, save_checkpoint
from .tensor import GradTape, Tensor, backward, count_flops, no_tape

__all__ = [
    "Adam",
    "GradTape",
    "Rng",
    "Tensor",
    "adam_update",
    "backward",
    "clip_by_global_norm",
    "count_flops",
    "load_checkpoint",
    "no_tape",
    "save_checkpoint",
]
