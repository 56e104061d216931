"""Reptile meta-training of child networks and episode-level evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import child_model
from .episodes import Episode, TaskDistribution
from .exceptions import InvalidConfigError, InvalidEpisodeError
from .search_space import ArchitectureString, decode, serialize
from .tensor import AdamState, Tape, Tensor, adam_step, checkpoint, clip_by_global_norm, ops

logger = logging.getLogger(__name__)


@dataclass
class ReptileConfig:
    """Meta-training schedule.  Defaults are the full 5-shot retrain schedule.

    ``inner_lr`` is large because the child nets have no normalization layers
    and their pooled features start out small; smaller rates barely move the
    loss within eight inner steps.  ``inner_grad_clip`` caps the global gradient
    norm of every inner and fine-tuning step, which keeps wide skip-heavy
    architectures from diverging at that rate (``None`` disables it).
    """

    outer_iterations: int = 7000
    outer_step_size: float = 1.0
    meta_batch: int = 5
    inner_iterations: int = 8
    inner_batch: int = 10
    inner_lr: float = 1.0
    train_shots: int = 15
    eval_inner_iterations: int = 88
    eval_inner_batch: int = 10
    eval_inner_lr: float | None = None
    inner_grad_clip: float | None = 1.0
    val_episodes: int = 10
    alpha_decay: bool = True
    outer_adam: bool = False
    adam_lr: float = 0.005
    dropout: float = 0.0
    per_layer_dropout: bool = False

    def validate(self, prefix: str = "reptile") -> None:
        positive_ints = ("meta_batch", "inner_batch", "train_shots", "eval_inner_batch",
                         "val_episodes")
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{prefix}.{name}: must be >= 1, got {getattr(self, name)}")
        for name in ("outer_iterations", "inner_iterations", "eval_inner_iterations"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{prefix}.{name}: must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.outer_step_size <= 1.0:
            raise InvalidConfigError(f"{prefix}.outer_step_size: must lie in (0, 1], "
                                     f"got {self.outer_step_size}")
        if self.eval_inner_lr is not None and not isinstance(self.eval_inner_lr, (int, float)):
            raise InvalidConfigError(f"{prefix}.eval_inner_lr: must be a number or null")
        if self.inner_lr < 0 or (self.eval_inner_lr is not None and self.eval_inner_lr < 0):
            raise InvalidConfigError(f"{prefix}.inner_lr: must be >= 0")
        if self.inner_grad_clip is not None and not (isinstance(self.inner_grad_clip, (int, float))
                                                     and self.inner_grad_clip > 0):
            raise InvalidConfigError(f"{prefix}.inner_grad_clip: must be > 0 or null, "
                                     f"got {self.inner_grad_clip!r}")
        if self.adam_lr <= 0:
            raise InvalidConfigError(f"{prefix}.adam_lr: must be > 0, got {self.adam_lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError(f"{prefix}.dropout: must lie in [0, 1), got {self.dropout}")

    @property
    def fine_tune_lr(self) -> float:
        return self.inner_lr if self.eval_inner_lr is None else self.eval_inner_lr

    def to_dict(self) -> dict:
        return asdict(self)


def _minibatches(n: int, batch: int, steps: int, rng: np.random.Generator):
    """Index batches cycling through fresh permutations; full batch when ``batch >= n``."""
    if batch >= n:
        full = np.arange(n)
        for _ in range(steps):
            yield full
        return
    pending = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        while len(pending) < batch:
            pending = np.concatenate([pending, rng.permutation(n)])
        yield pending[:batch]
        pending = pending[batch:]


def loss_and_grads(net: child_model.ChildNetwork, x: np.ndarray, y: np.ndarray,
                   train: bool = True, rng: np.random.Generator | None = None):
    params = net.parameters()
    with Tape() as tape:
        loss = ops.softmax_cross_entropy(net.forward(Tensor(x), train=train, rng=rng), y)
    return loss.item(), tape.gradient(loss, params)


def _sgd(net: child_model.ChildNetwork, episode_x, episode_y, steps: int, lr: float, batch: int,
         rng: np.random.Generator, clip: float | None = None) -> list[float]:
    losses = []
    if steps == 0 or lr == 0:
        return losses
    params = net.parameters()
    for idx in _minibatches(len(episode_y), batch, steps, rng):
        loss, grads = loss_and_grads(net, episode_x[idx], episode_y[idx], train=True, rng=rng)
        for p, g in zip(params, clip_by_global_norm(grads, clip)):
            p.data -= lr * g
        losses.append(loss)
    return losses


def inner_adapt(net: child_model.ChildNetwork, theta: np.ndarray, episode: Episode, k: int,
                inner_lr: float, inner_batch: int, rng: np.random.Generator,
                losses: list | None = None, clip: float | None = None) -> np.ndarray:
    """``k`` SGD steps on ``episode.train`` starting from ``theta``; returns the adapted vector.

    ``clip`` bounds each step's global gradient norm.  ``net`` is restored to
    ``theta`` afterwards.
    """
    if len(episode.train_y) == 0:
        raise InvalidEpisodeError("episode has an empty train split")
    net.load_param_vector(theta)
    step_losses = _sgd(net, episode.train_x, episode.train_y, k, inner_lr, inner_batch, rng, clip)
    if losses is not None:
        losses.extend(step_losses)
    adapted = net.param_vector()
    net.load_param_vector(theta)
    return adapted


def outer_update(theta: np.ndarray, adapted, alpha: float) -> np.ndarray:
    """``theta + alpha * mean_i(W_i - theta)``."""
    adapted = list(adapted)
    if not adapted:
        raise InvalidConfigError("outer update needs at least one adapted vector")
    if alpha == 1.0:
        # same value, but avoids the theta + (W - theta) rounding round-trip
        return np.mean(adapted, axis=0)
    delta = np.mean([w - theta for w in adapted], axis=0)
    return theta + alpha * delta


def evaluate(net: child_model.ChildNetwork, theta: np.ndarray, episode: Episode,
             cfg: ReptileConfig, rng: np.random.Generator) -> float:
    """Fine-tune a copy of ``theta`` on ``episode.train`` then classify each test example alone."""
    if len(episode.test_y) == 0:
        raise InvalidEpisodeError("episode has an empty test split")
    net.load_param_vector(theta)
    _sgd(net, episode.train_x, episode.train_y, cfg.eval_inner_iterations, cfg.fine_tune_lr,
         cfg.eval_inner_batch, rng, cfg.inner_grad_clip)
    correct = 0
    for x, y in zip(episode.test_x, episode.test_y):
        correct += int(net.predict(x[None])[0] == y)
    net.load_param_vector(theta)
    return correct / len(episode.test_y)


def evaluate_many(net, theta, tasks: TaskDistribution, split: str, n_episodes: int,
                  cfg: ReptileConfig, rng: np.random.Generator) -> float:
    accs = [evaluate(net, theta, tasks.sample(split, rng), cfg, rng) for _ in range(n_episodes)]
    return float(np.mean(accs))


def meta_train(net: child_model.ChildNetwork, tasks: TaskDistribution, cfg: ReptileConfig,
               rng: np.random.Generator, metrics: Callable[[dict], None] | None = None,
               val_every: int = 0):
    """Reptile over meta-train episodes; returns ``(theta, mean meta-val accuracy)``.

    ``metrics`` receives ``{iter, mean_inner_loss}`` after each outer step, plus
    ``val_accuracy`` every ``val_every`` steps when that is positive.  The
    network is left loaded with the final ``theta``.
    """
    cfg.validate()
    theta = net.param_vector()
    adam = AdamState() if cfg.outer_adam else None
    holder = Tensor(theta)
    # periodic validation gets its own stream so logging never shifts training draws
    val_rng = np.random.default_rng(rng.integers(2 ** 63))
    for it in range(cfg.outer_iterations):
        frac = 1.0 - it / cfg.outer_iterations if cfg.alpha_decay else 1.0
        losses: list[float] = []
        adapted = [inner_adapt(net, theta, tasks.sample("meta-train", rng, cfg.train_shots),
                               cfg.inner_iterations, cfg.inner_lr, cfg.inner_batch, rng, losses,
                               cfg.inner_grad_clip)
                   for _ in range(cfg.meta_batch)]
        if adam is None:
            theta = outer_update(theta, adapted, cfg.outer_step_size * frac)
        else:
            holder.data = theta.copy()
            delta = np.mean([w - theta for w in adapted], axis=0)
            adam_step(adam, [holder], [-delta], cfg.adam_lr * frac)
            theta = holder.data
        if metrics is not None:
            record = {"iter": it + 1, "mean_inner_loss": float(np.mean(losses)) if losses else None}
            if val_every and (it + 1) % val_every == 0:
                record["val_accuracy"] = evaluate_many(net, theta, tasks, "meta-val", cfg.val_episodes,
                                                       cfg, val_rng)
            metrics(record)
    reward = evaluate_many(net, theta, tasks, "meta-val", cfg.val_episodes, cfg, rng)
    net.load_param_vector(theta)
    return theta, reward


# ---------------------------------------------------------------- search reward / retrain

class SearchReward:
    """Architecture -> meta-val accuracy, meta-training in the shared bank.

    Each call re-initializes the shared classifier head, runs a truncated
    Reptile schedule and writes the result back into the bank, so later calls
    start from weights earlier architectures trained.  Call ``i`` draws its
    episodes from ``SeedSequence([seed, i])`` unless an explicit seed is passed.
    """

    def __init__(self, bank: child_model.SharedWeightBank, tasks: TaskDistribution,
                 cfg: ReptileConfig, seed: int = 0):
        cfg.validate("search_reptile")
        self.bank = bank
        self.tasks = tasks
        self.cfg = cfg
        self.seed = seed
        self.calls = 0

    def __call__(self, arch: ArchitectureString, seed=None) -> float:
        if seed is None:
            seed = np.random.SeedSequence([self.seed, self.calls])
        self.calls += 1
        rng = np.random.default_rng(seed)
        net = child_model.build(self.bank, decode(arch), self.tasks.n_way, "shared",
                                dropout=self.cfg.dropout, per_layer_dropout=self.cfg.per_layer_dropout)
        self.bank.reset_head(rng)
        _, reward = meta_train(net, self.tasks, self.cfg, rng)
        return float(reward)


def reward_fn_for_search(bank, tasks, cfg_search: ReptileConfig, seed: int = 0) -> SearchReward:
    return SearchReward(bank, tasks, cfg_search, seed)


def save_theta(path, net: child_model.ChildNetwork) -> None:
    checkpoint.save(path, [(t.name, t.data) for t in net.parameters()])


def retrain_one(arch: ArchitectureString, tasks: TaskDistribution, cfg: ReptileConfig,
                seed: int, test_episodes: int, channels: int = 16, image_size: int = 16,
                metrics=None, checkpoint_path=None) -> dict:
    """Fresh build + full meta-training, scored on meta-test episodes.

    ``checkpoint_path``, when given, receives the meta-trained parameters.
    """
    init_ss, train_ss, test_ss = np.random.SeedSequence(seed).spawn(3)
    bank = child_model.SharedWeightBank(arch.n_layers, tasks.n_way, channels, image_size,
                                        seed=int(init_ss.generate_state(1)[0]))
    net = child_model.build(bank, decode(arch), tasks.n_way, "fresh",
                            rng=np.random.default_rng(init_ss), dropout=cfg.dropout,
                            per_layer_dropout=cfg.per_layer_dropout)
    theta, val_acc = meta_train(net, tasks, cfg, np.random.default_rng(train_ss), metrics,
                                val_every=max(1, cfg.outer_iterations // 10) if metrics else 0)
    if checkpoint_path is not None:
        save_theta(checkpoint_path, net)
    test_acc = evaluate_many(net, theta, tasks, "meta-test", test_episodes, cfg,
                             np.random.default_rng(test_ss))
    return {"arch": serialize(arch), "test_accuracy": test_acc, "val_accuracy": val_acc,
            "episodes_evaluated": test_episodes, "seed": seed}


def retrain_top(archs, tasks: TaskDistribution, cfg: ReptileConfig, seed: int = 0,
                test_episodes: int = 100, channels: int = 16, image_size: int = 16,
                metrics_for=None, checkpoint_for=None) -> list[dict]:
    """Retrain each architecture from scratch with the same seed; rank by test accuracy.

    ``metrics_for(i)`` / ``checkpoint_for(i)`` optionally supply the metrics
    callback and checkpoint path for the ``i``-th input architecture.  Ties keep
    input order.
    """
    rows = []
    for i, a in enumerate(archs):
        rows.append(retrain_one(a, tasks, cfg, seed, test_episodes, channels, image_size,
                                metrics_for(i) if metrics_for else None,
                                checkpoint_for(i) if checkpoint_for else None))
    return sorted(rows, key=lambda r: -r["test_accuracy"])


def write_metrics(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
