"""REINFORCE with a moving-average baseline and experience replay for the controller."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import controller as ctl
from .exceptions import InvalidBatchError, InvalidConfigError, InvalidRewardError
from .search_space import ArchitectureString, serialize
from .tensor import Adam, Tape, ops

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    S: str
    A: ArchitectureString
    R: float

    def __post_init__(self):
        _check_reward(self.R)


def _check_reward(r) -> float:
    r = float(r)
    if not np.isfinite(r) or not 0.0 <= r <= 1.0:
        raise InvalidRewardError(f"reward must be a finite value in [0, 1], got {r}")
    return r


class ReplayBuffer:
    """Bounded FIFO of transitions; once full, the oldest entry is evicted."""

    def __init__(self, capacity: int = 200):
        if capacity < 1:
            raise InvalidConfigError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, transition: Transition) -> None:
        self._items.append(transition)

    def sample(self, rng: np.random.Generator) -> Transition:
        """One transition drawn uniformly (with replacement across calls)."""
        return self._items[int(rng.integers(len(self._items)))]


class BaselineTracker:
    """Exponential moving average of rewards; the first reward initializes it."""

    def __init__(self, decay: float = 0.95):
        if not 0.0 <= decay < 1.0:
            raise InvalidConfigError(f"baseline decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.value = 0.0
        self.initialized = False

    def update(self, reward: float) -> float:
        reward = _check_reward(reward)
        if not self.initialized:
            self.value = reward
            self.initialized = True
        else:
            # Same as decay*bl + (1-decay)*R, but leaves bl bit-exact when R == bl.
            self.value = self.value + (1.0 - self.decay) * (reward - self.value)
        return self.value


def baseline_update(tracker: BaselineTracker, reward: float) -> float:
    return tracker.update(reward)


def advantage(reward: float, baseline: float) -> float:
    return reward - baseline


def admission_probability(reward: float, baseline: float) -> float:
    """Probability of keeping a transition: ``R / bl`` when ``R <= bl``, else 1.

    A non-positive baseline admits unconditionally.
    """
    if baseline <= 0:
        return 1.0
    return 1.0 if reward > baseline else reward / baseline


def maybe_store(buffer: ReplayBuffer, transition: Transition, baseline: float,
                rng: np.random.Generator) -> bool:
    p = admission_probability(transition.R, baseline)
    if p >= 1.0:
        stored = True
    elif p <= 0.0:
        stored = False
    else:
        stored = bool(rng.random() < p)
    if stored:
        buffer.add(transition)
    return stored


def policy_gradient(policy: ctl.ControllerPolicy, batch, baseline: float) -> list[np.ndarray]:
    """Ascent direction ``(1/m) sum_j (R_j - bl) grad log P(A_j)`` per parameter."""
    batch = list(batch)
    if not batch:
        raise InvalidBatchError("policy-gradient batch is empty")
    params = policy.parameters()
    weights = [advantage(t.R, baseline) for t in batch]
    with Tape() as tape:
        objective = None
        for t, w in zip(batch, weights):
            if w == 0.0:
                continue
            term = ops.scale(ctl.log_prob(policy, t.A), w / len(batch))
            objective = term if objective is None else ops.add(objective, term)
    if objective is None:
        return [np.zeros_like(p.data) for p in params]
    return tape.gradient(objective, params)


def pg_step(policy: ctl.ControllerPolicy, optimizer: Adam, batch, baseline: float) -> list[np.ndarray]:
    """One Adam ascent step on the advantage-weighted log-likelihood.

    A batch whose advantages are all zero carries no signal; the step is
    skipped entirely so Adam's running moments cannot move the policy.
    Returns the ascent gradient.
    """
    grads = policy_gradient(policy, batch, baseline)
    if all(not np.any(g) for g in grads):
        return grads
    optimizer.step([-g for g in grads])
    return grads


def replay_phase(policy: ctl.ControllerPolicy, optimizer: Adam, buffer: ReplayBuffer,
                 baseline: float, count: int, rng: np.random.Generator) -> list[Transition]:
    """``count`` single-transition updates on uniform draws from the buffer."""
    if len(buffer) == 0:
        return []
    drawn = []
    for _ in range(count):
        t = buffer.sample(rng)
        pg_step(policy, optimizer, [t], baseline)
        drawn.append(t)
    return drawn


def ema_series(rewards, decay: float = 0.95) -> list[float]:
    """Moving average of a reward sequence, initialized at the first reward."""
    tracker = BaselineTracker(decay)
    return [tracker.update(r) for r in rewards]


# ---------------------------------------------------------------- search loop

@dataclass
class SearchConfig:
    n_layers: int = 8
    hidden_size: int = 100
    controller_lr: float = 0.01
    steps: int = 1000
    replay: bool = True
    replay_period: int = 60
    replay_count: int = 5
    buffer_capacity: int = 200
    baseline_decay: float = 0.95
    top_n: int = 3

    def validate(self) -> None:
        checks = {
            "n_layers": self.n_layers >= 1,
            "hidden_size": self.hidden_size >= 1,
            "controller_lr": self.controller_lr > 0,
            "steps": self.steps >= 0,
            "replay_period": self.replay_period >= 1,
            "replay_count": self.replay_count >= 0,
            "buffer_capacity": self.buffer_capacity >= 1,
            "baseline_decay": 0.0 <= self.baseline_decay < 1.0,
            "top_n": self.top_n >= 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise InvalidConfigError(f"search.{name}: invalid value {getattr(self, name)!r}")


@dataclass
class SearchResult:
    ranking: list[tuple[ArchitectureString, float]]
    log: list[dict] = field(default_factory=list)
    policy: ctl.ControllerPolicy | None = None
    baseline: float = 0.0

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for record in self.log:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def rank_architectures(history, top_n: int) -> list[tuple[ArchitectureString, float]]:
    """Distinct architectures by best observed reward; ties go to the earliest seen."""
    best: dict[ArchitectureString, float] = {}
    first_seen: dict[ArchitectureString, int] = {}
    for order, (arch, reward) in enumerate(history):
        first_seen.setdefault(arch, order)
        best[arch] = max(best.get(arch, -np.inf), reward)
    ranked = sorted(best, key=lambda a: (-best[a], first_seen[a]))
    return [(arch, best[arch]) for arch in ranked[:top_n]]


def search(config: SearchConfig, reward_fn: Callable[[ArchitectureString], float],
           seed: int = 0, on_step: Callable[[dict], None] | None = None) -> SearchResult:
    """Controller search loop with experience replay.

    Per step ``j``: sample an architecture, score it with ``reward_fn``, take a
    policy-gradient step with advantage ``R_j - bl_j``, offer the transition to
    the replay buffer against the same ``bl_j``, then fold ``R_j`` into the
    baseline.  Every ``replay_period`` steps, ``replay_count`` buffered
    transitions are replayed.  The very first reward initializes the baseline,
    so step one has zero advantage.
    """
    config.validate()
    init_ss, sample_ss, store_ss, replay_ss = np.random.SeedSequence(seed).spawn(4)
    policy = ctl.ControllerPolicy(config.hidden_size, rng=np.random.default_rng(init_ss))
    optimizer = Adam(policy.parameters(), lr=config.controller_lr)
    sample_rng = np.random.default_rng(sample_ss)
    store_rng = np.random.default_rng(store_ss)
    replay_rng = np.random.default_rng(replay_ss)
    tracker = BaselineTracker(config.baseline_decay)
    buffer = ReplayBuffer(config.buffer_capacity)
    history, log = [], []

    for j in range(1, config.steps + 1):
        arch, _ = ctl.sample(policy, config.n_layers, sample_rng)
        raw = reward_fn(arch)
        try:
            reward = _check_reward(raw)
        except InvalidRewardError as exc:
            raise InvalidRewardError(f"step {j}, arch {serialize(arch)!r}: {exc}") from None
        if not tracker.initialized:
            tracker.update(reward)
        bl = tracker.value
        transition = Transition(ctl.START_STATE, arch, reward)
        pg_step(policy, optimizer, [transition], bl)
        stored = maybe_store(buffer, transition, bl, store_rng)
        if j > 1:
            tracker.update(reward)
        replayed = 0
        if config.replay and j % config.replay_period == 0:
            replayed = len(replay_phase(policy, optimizer, buffer, tracker.value,
                                        config.replay_count, replay_rng))
        record = {"step": j, "arch": serialize(arch), "reward": reward, "baseline": bl,
                  "advantage": advantage(reward, bl), "stored": stored, "replayed_steps": replayed}
        log.append(record)
        history.append((arch, reward))
        if on_step is not None:
            on_step(record)
        logger.debug("step %d reward %.4f baseline %.4f", j, reward, bl)

    return SearchResult(rank_architectures(history, config.top_n), log, policy, tracker.value)

