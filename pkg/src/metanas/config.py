"""Run configuration: one JSON document, optionally patched with dotted overrides.

Layout (every section optional except ``seed``)::

    {
      "seed": 0,
      "output_dir": "runs/example",
      "episodes": {"n_way": 5, "k_shot": 1, "k_test": 1, "dataset": "synthetic", ...},
      "model": {"channels": 16},
      "search": {"n_layers": 8, "steps": 1000, "replay_period": 60, ...},
      "search_reptile": {"outer_iterations": 100, ...},
      "reptile": {"outer_iterations": 7000, "outer_adam": true, ...},
      "retrain": {"test_episodes": 100}
    }

Unknown keys are rejected so that typos fail loudly instead of silently
falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import episodes as ep
from .exceptions import InvalidConfigError
from .pg_trainer import SearchConfig
from .reptile import ReptileConfig


@dataclass
class GlyphConfig:
    strokes: int = 3
    instances_per_class: int = 20
    jitter: float = 0.5
    shift: float = 1.0
    stroke_width: float = 0.7
    pixel_noise: float = 0.05
    rotate_instances: bool = False


@dataclass
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    k_test: int = 1
    dataset: str = "synthetic"  # or "corpus"
    corpus_root: str | None = None
    n_classes: int = 100
    image_size: int = 16
    split_fractions: list = field(default_factory=lambda: [0.64, 0.16, 0.20])
    pool_seed: int | None = None  # defaults to the run seed
    glyph: GlyphConfig = field(default_factory=GlyphConfig)

    def validate(self) -> None:
        if self.n_way < 2:
            raise InvalidConfigError(f"episodes.n_way: must be >= 2, got {self.n_way}")
        if self.k_shot < 1:
            raise InvalidConfigError(f"episodes.k_shot: must be >= 1, got {self.k_shot}")
        if self.k_test < 1:
            raise InvalidConfigError(f"episodes.k_test: must be >= 1, got {self.k_test}")
        if self.dataset not in ("synthetic", "corpus"):
            raise InvalidConfigError(f"episodes.dataset: expected 'synthetic' or 'corpus', "
                                     f"got {self.dataset!r}")
        if self.dataset == "corpus" and not self.corpus_root:
            raise InvalidConfigError("episodes.corpus_root: required when dataset is 'corpus'")
        if self.image_size < 1:
            raise InvalidConfigError(f"episodes.image_size: must be >= 1, got {self.image_size}")


@dataclass
class ModelConfig:
    channels: int = 16

    def validate(self) -> None:
        if self.channels < 1:
            raise InvalidConfigError(f"model.channels: must be >= 1, got {self.channels}")


@dataclass
class RetrainConfig:
    test_episodes: int = 100

    def validate(self) -> None:
        if self.test_episodes < 1:
            raise InvalidConfigError(f"retrain.test_episodes: must be >= 1, got {self.test_episodes}")


def _search_reptile_defaults() -> ReptileConfig:
    return ReptileConfig(outer_iterations=100, eval_inner_iterations=50, eval_inner_batch=5)


def _retrain_reptile_defaults() -> ReptileConfig:
    return ReptileConfig(eval_inner_iterations=50, eval_inner_batch=5, outer_adam=True,
                         adam_lr=0.003)


@dataclass
class RunConfig:
    seed: int | None = None
    output_dir: str = "runs/default"
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    search_reptile: ReptileConfig = field(default_factory=_search_reptile_defaults)
    reptile: ReptileConfig = field(default_factory=_retrain_reptile_defaults)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)

    def validate(self) -> None:
        if self.seed is None:
            raise InvalidConfigError("seed: required (no implicit nondeterminism)")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise InvalidConfigError(f"seed: must be a non-negative integer, got {self.seed!r}")
        self.episodes.validate()
        self.model.validate()
        self.search.validate()
        self.search_reptile.validate("search_reptile")
        self.reptile.validate("reptile")
        self.retrain.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def pool_seed(self) -> int:
        return self.seed if self.episodes.pool_seed is None else self.episodes.pool_seed


# ---------------------------------------------------------------- dict <-> dataclass

def _build(cls, data: Any, path: str, base=None):
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise InvalidConfigError(f"{where}{unknown[0]}: unknown field")
    obj = cls() if base is None else base
    for name, value in data.items():
        current = getattr(obj, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value, where, base=current)
        elif value is None and "None" in str(fields[name].type):
            pass
        else:
            value = _coerce(current, value, where)
        setattr(obj, name, value)
    return obj


def _coerce(default, value, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise InvalidConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise InvalidConfigError(f"{where}: expected a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise InvalidConfigError(f"{where}: expected a string, got {value!r}")
    return value


def merge(base: dict, patch: dict) -> dict:
    """Recursive dict merge; ``patch`` wins on leaves."""
    out = dict(base)
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``"a.b.c=value"`` -> ``{"a": {"b": {"c": value}}}``; values are JSON, else strings."""
    if "=" not in text:
        raise InvalidConfigError(f"override {text!r}: expected dotted.path=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise InvalidConfigError(f"override {text!r}: empty path component")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {parts[-1]: value}
    for part in reversed(parts[:-1]):
        out = {part: out}
    return out


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None


def load(path=None, overrides=(), patch: dict | None = None) -> RunConfig:
    data = read_json(path) if path is not None else {}
    if patch:
        data = merge(data, patch)
    for text in overrides:
        data = merge(data, parse_override(text))
    return from_dict(data)


def default_dict(seed: int = 0) -> dict:
    cfg = RunConfig(seed=seed)
    return cfg.to_dict()


# ---------------------------------------------------------------- data construction

def build_tasks(cfg: RunConfig, train_shots: int | None = None) -> ep.TaskDistribution:
    e = cfg.episodes
    if e.dataset == "synthetic":
        spec = ep.SyntheticGlyphSpec(size=e.image_size, **dataclasses.asdict(e.glyph))
        pools = ep.make_synthetic_pool(spec, e.n_classes, tuple(e.split_fractions), seed=cfg.pool_seed)
    else:
        pools = ep.split_pool(ep.load_corpus(e.corpus_root, e.image_size), tuple(e.split_fractions),
                              seed=cfg.pool_seed)
    return ep.TaskDistribution(pools, n_way=e.n_way, k_shot=e.k_shot, k_test=e.k_test,
                               train_shots=train_shots)


def derive_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
