"""LSTM controller that emits architecture strings one decision at a time.

Decision order for layer ``k``: one categorical op choice, then ``k - 1``
Bernoulli skip bits (candidate layers ``1..k-1`` in ascending order).  The
input at every step is the embedding of the previous decision; step one reads
a learned start token.  Embedding rows are: op ids ``0..7``, skip bit 0 at
``8``, skip bit 1 at ``9``, the start token at ``10``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArchitectureError, InvalidConfigError
from .search_space import N_OPS, ArchitectureString, Layer
from .tensor import Tensor, checkpoint, ops

SKIP_TOKEN = N_OPS
START_TOKEN = N_OPS + 2
N_TOKENS = N_OPS + 3
START_STATE = "start"

_PARAM_NAMES = ("embedding", "w_input", "w_hidden", "bias", "op_w", "op_b", "skip_w", "skip_b")


class ControllerPolicy:
    """One-layer LSTM with an op head (``H -> 8``) and a shared skip head (``H -> 1``).

    LSTM weights and embeddings start uniform in ``[-init_range, init_range]``.
    Heads start at zero unless ``zero_heads=False``, so a fresh policy samples
    ops uniformly and skip bits with probability one half.
    """

    def __init__(self, hidden_size: int = 100, rng: np.random.Generator | None = None,
                 init_range: float = 0.1, zero_heads: bool = True):
        if hidden_size < 1:
            raise InvalidConfigError(f"hidden_size must be >= 1, got {hidden_size}")
        rng = np.random.default_rng(0) if rng is None else rng
        h = hidden_size
        self.hidden_size = h

        def uniform(*shape):
            return rng.uniform(-init_range, init_range, size=shape)

        def head(*shape):
            return np.zeros(shape) if zero_heads else uniform(*shape)

        arrays = {
            "embedding": uniform(N_TOKENS, h),
            "w_input": uniform(h, 4 * h),
            "w_hidden": uniform(h, 4 * h),
            "bias": np.zeros(4 * h),
            "op_w": head(h, N_OPS),
            "op_b": np.zeros(N_OPS),
            "skip_w": head(h, 1),
            "skip_b": np.zeros(1),
        }
        self.params = {name: Tensor(arrays[name], requires_grad=True, name=name)
                       for name in _PARAM_NAMES}

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in _PARAM_NAMES]

    def copy(self) -> "ControllerPolicy":
        clone = ControllerPolicy.__new__(ControllerPolicy)
        clone.hidden_size = self.hidden_size
        clone.params = {name: Tensor(t.data.copy(), requires_grad=True, name=name)
                        for name, t in self.params.items()}
        return clone

    def state_records(self):
        return [(name, self.params[name].data) for name in _PARAM_NAMES]

    def save(self, path) -> None:
        checkpoint.save(path, self.state_records())

    @classmethod
    def load(cls, path) -> "ControllerPolicy":
        records = dict(checkpoint.load(path))
        policy = cls(hidden_size=records["embedding"].shape[1])
        for name in _PARAM_NAMES:
            policy.params[name].data = records[name].copy()
        return policy


@dataclass(frozen=True)
class SampledDecisions:
    actions: tuple[int, ...]
    log_probs: tuple[float, ...]

    @property
    def total(self) -> float:
        return float(sum(self.log_probs))

    @property
    def n_decisions(self) -> int:
        return len(self.actions)


def _rollout(policy: ControllerPolicy, n_layers: int, forced=None, rng=None):
    """Run the controller for ``n_layers`` layers.

    With ``forced`` (a flat action list) the decisions are teacher-forced;
    otherwise they are drawn from ``rng``.  Returns the actions and the
    per-decision log-probability tensors.
    """
    p = policy.params
    h = Tensor(np.zeros((1, policy.hidden_size)))
    c = Tensor(np.zeros((1, policy.hidden_size)))
    token = START_TOKEN
    actions: list[int] = []
    logps: list[Tensor] = []

    def step(tok):
        nonlocal h, c
        x = ops.embedding_lookup(p["embedding"], tok)
        h, c = ops.lstm_cell(x, h, c, p["w_input"], p["w_hidden"], p["bias"])
        return h

    for k in range(1, n_layers + 1):
        out = step(token)
        log_pi = ops.log_softmax(ops.dense(out, p["op_w"], p["op_b"]))
        if forced is None:
            probs = np.exp(log_pi.data[0])
            op = min(int(np.searchsorted(np.cumsum(probs), rng.random(), side="right")), N_OPS - 1)
        else:
            op = forced[len(actions)]
        actions.append(op)
        logps.append(ops.getitem(log_pi, (0, op)))
        token = op
        for _ in range(k - 1):
            out = step(token)
            z = ops.dense(out, p["skip_w"], p["skip_b"])
            if forced is None:
                prob_one = float(np.exp(-np.logaddexp(0.0, -z.data[0, 0])))
                bit = int(rng.random() < prob_one)
            else:
                bit = forced[len(actions)]
            actions.append(bit)
            logps.append(ops.getitem(ops.log_sigmoid(z if bit else ops.neg(z)), (0, 0)))
            token = SKIP_TOKEN + bit
    return actions, logps


def actions_to_arch(actions, n_layers: int) -> ArchitectureString:
    layers, pos = [], 0
    for k in range(1, n_layers + 1):
        op = actions[pos]
        bits = tuple(actions[pos + 1:pos + k])
        pos += k
        layers.append(Layer(op, bits))
    return ArchitectureString(tuple(layers))


def arch_to_actions(arch: ArchitectureString) -> list[int]:
    flat = []
    for layer in arch.layers:
        flat.append(layer.op)
        flat.extend(layer.skips)
    return flat


def sample(policy: ControllerPolicy, n_layers: int, rng: np.random.Generator):
    """Draw one architecture; returns ``(ArchitectureString, SampledDecisions)``."""
    if n_layers < 1:
        raise InvalidConfigError(f"n_layers must be >= 1, got {n_layers}")
    actions, logps = _rollout(policy, n_layers, rng=rng)
    decisions = SampledDecisions(tuple(actions), tuple(float(lp.data) for lp in logps))
    return actions_to_arch(actions, n_layers), decisions


def log_prob(policy: ControllerPolicy, arch: ArchitectureString, n_layers: int | None = None) -> Tensor:
    """Log-probability of ``arch`` under ``policy``; differentiable inside a Tape."""
    if not isinstance(arch, ArchitectureString):
        raise InvalidArchitectureError(f"expected ArchitectureString, got {type(arch).__name__}")
    if n_layers is not None and arch.n_layers != n_layers:
        raise InvalidArchitectureError(
            f"architecture has {arch.n_layers} layers, policy asked for {n_layers}")
    _, logps = _rollout(policy, arch.n_layers, forced=arch_to_actions(arch))
    total = logps[0]
    for lp in logps[1:]:
        total = ops.add(total, lp)
    return total


def op_probabilities(policy: ControllerPolicy) -> np.ndarray:
    """Op distribution at layer 1 (the only op decision that has no history)."""
    p = policy.params
    zeros = Tensor(np.zeros((1, policy.hidden_size)))
    x = ops.embedding_lookup(p["embedding"], START_TOKEN)
    h, _ = ops.lstm_cell(x, zeros, zeros, p["w_input"], p["w_hidden"], p["bias"])
    return ops.softmax(ops.dense(h, p["op_w"], p["op_b"]).data)[0]


def entropy_estimate(policy: ControllerPolicy, n_layers: int, n_samples: int,
                     rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of the policy entropy over architectures."""
    if n_samples < 1:
        raise InvalidConfigError(f"n_samples must be >= 1, got {n_samples}")
    return float(np.mean([-sample(policy, n_layers, rng)[1].total for _ in range(n_samples)]))
