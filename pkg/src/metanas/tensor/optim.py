"""In-place first-order optimizers over lists of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import InvalidConfigError
from .tape import Tensor


def _check_lr(lr: float):
    if not lr > 0:
        raise InvalidConfigError(f"learning rate must be positive, got {lr}")


def sgd_step(params: list[Tensor], grads: list[np.ndarray], lr: float) -> None:
    _check_lr(lr)
    for p, g in zip(params, grads):
        p.data -= lr * g


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


@dataclass
class AdamState:
    """Moment estimates for :func:`adam_step`; one array pair per parameter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray], lr: float) -> None:
    """Bias-corrected Adam descent step, updating ``params`` and ``state`` in place."""
    _check_lr(lr)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam bound to a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        _check_lr(lr)
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        adam_step(self.state, self.params, grads, self.lr if lr is None else lr)
