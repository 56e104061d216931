"""Minimal fp64 tensors with tape-based reverse-mode differentiation."""

from . import checkpoint, ops
from .optim import Adam, AdamState, adam_step, clip_by_global_norm, sgd_step
from .tape import Tape, Tensor, as_tensor

__all__ = ["Adam", "AdamState", "Tape", "Tensor", "adam_step", "as_tensor",
           "clip_by_global_norm",
           "checkpoint", "ops", "sgd_step"]
