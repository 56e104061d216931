"""``metanas`` command line: search, retrain, transfer, plot and config.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.

Every JSON report is a pure function of the config, the input files and the
seed.  Wall-clock information goes to a separate ``run_meta.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import child_model, config as config_mod, episodes as ep, pg_trainer as pg, reptile as rp
from .exceptions import ArchitectureParseError, InvalidConfigError, MetaNASError
from .search_space import parse, serialize

logger = logging.getLogger("metanas")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Bad input files or arguments (exit code 2)."""


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_run_meta(out: Path, command: str, started: float) -> None:
    meta = {"command": command, "started_unix": started, "elapsed_seconds": time.time() - started}
    _dump(out / "run_meta.json", meta)


def _output_dir(cfg: config_mod.RunConfig, override: str | None) -> Path:
    out = Path(override or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidConfigError(f"output_dir: cannot create {out} ({exc.strerror})") from None
    return out


def read_archs(path) -> list:
    """One architecture per non-blank line; ``#`` starts a comment line."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"{path}: cannot read architecture file ({exc.strerror})") from None
    archs = []
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            archs.append(parse(text))
        except ArchitectureParseError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
        except MetaNASError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return archs


# ---------------------------------------------------------------- commands

def cmd_search(cfg: config_mod.RunConfig, out: Path) -> dict:
    tasks = config_mod.build_tasks(cfg)
    bank_seed, reward_seed, search_seed = config_mod.derive_seeds(cfg.seed, 3)
    bank = child_model.SharedWeightBank(cfg.search.n_layers, cfg.episodes.n_way, cfg.model.channels,
                                        cfg.episodes.image_size, seed=bank_seed)
    reward_fn = rp.reward_fn_for_search(bank, tasks, cfg.search_reptile, seed=reward_seed)
    ep.write_manifest(out / "pools.json", tasks.pools)

    log_path = out / "transitions.jsonl"
    with open(log_path, "w") as fh:
        def on_step(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            logger.info("step %d reward %.3f baseline %.3f %s", record["step"], record["reward"],
                        record["baseline"], record["arch"])

        result = pg.search(cfg.search, reward_fn, seed=search_seed, on_step=on_step)

    top = [serialize(a) for a, _ in result.ranking]
    (out / "top_archs.txt").write_text("".join(line + "\n" for line in top))
    result.policy.save(out / "controller.ck")
    bank.save(out / "bank.ck")
    report = {
        "config": cfg.to_dict(),
        "steps": cfg.search.steps,
        "final_baseline": result.baseline,
        "top": [{"arch": serialize(a), "reward": r} for a, r in result.ranking],
    }
    _dump(out / "search_report.json", report)
    return report


def cmd_retrain(cfg: config_mod.RunConfig, archs, out: Path) -> list[dict]:
    tasks = config_mod.build_tasks(cfg)
    ep.write_manifest(out / "pools.json", tasks.pools)
    metrics_files = {}

    def metrics_for(i):
        fh = open(out / f"retrain_metrics_{i}.jsonl", "w")
        metrics_files[i] = fh

        def write(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            if "val_accuracy" in record:
                logger.info("arch %d iter %d val %.3f", i, record["iter"], record["val_accuracy"])
        return write

    try:
        rows = rp.retrain_top(archs, tasks, cfg.reptile, seed=cfg.seed,
                              test_episodes=cfg.retrain.test_episodes, channels=cfg.model.channels,
                              image_size=cfg.episodes.image_size, metrics_for=metrics_for,
                              checkpoint_for=lambda i: out / f"theta_{i}.ck")
    finally:
        for fh in metrics_files.values():
            fh.close()
    _dump(out / "final_report.json", rows)
    return rows


def ema_table(path, decay: float = 0.95) -> list[tuple[int, float, float]]:
    rows = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"{path}: cannot read log ({exc.strerror})") from None
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            raise UsageError(f"{path}:{lineno}: not a JSON record") from None
    rewards = [float(r["reward"]) for r in records]
    for r, e in zip(records, pg.ema_series(rewards, decay)):
        rows.append((int(r["step"]), float(r["reward"]), float(e)))
    return rows


def render_table(rows) -> str:
    if not rows:
        return ""
    lines = ["step\treward\tema"]
    lines += [f"{s}\t{r:.6f}\t{e:.6f}" for s, r, e in rows]
    return "\n".join(lines) + "\n"


def render_svg(rows, width: int = 640, height: int = 320) -> str:
    if not rows:
        return ""
    pad = 30
    steps = [s for s, _, _ in rows]
    lo, hi = min(steps), max(steps)
    span = max(hi - lo, 1)

    def xy(step, value):
        x = pad + (step - lo) / span * (width - 2 * pad)
        y = height - pad - value * (height - 2 * pad)
        return f"{x:.2f},{y:.2f}"

    ema = " ".join(xy(s, e) for s, _, e in rows)
    raw = " ".join(xy(s, r) for s, r, _ in rows)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n'
            f'<polyline points="{raw}" fill="none" stroke="#bbbbbb" stroke-width="1"/>\n'
            f'<polyline points="{ema}" fill="none" stroke="#1f77b4" stroke-width="2"/>\n'
            f'<text x="{pad}" y="{pad - 10}" font-size="12">EMA reward, steps {lo}-{hi}</text>\n'
            f'</svg>\n')


# ---------------------------------------------------------------- argument handling

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="run config JSON file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config leaf, e.g. --set search.steps=50 (repeatable)")
    p.add_argument("--output-dir", "-o", help="overrides output_dir from the config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metanas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="controller search; writes transitions.jsonl and top_archs.txt")
    _add_config_args(p)

    p = sub.add_parser("retrain", help="retrain architectures from scratch; writes final_report.json")
    _add_config_args(p)
    p.add_argument("--archs", required=True, help="file with one architecture per line")
    p.add_argument("--top", type=int, default=None, help="only the first N architectures")

    p = sub.add_parser("transfer", help="retrain architectures under a different episode setup")
    _add_config_args(p)
    p.add_argument("--archs", required=True, help="file with one architecture per line")
    p.add_argument("--task", required=True,
                   help="JSON object merged over the config, e.g. {\"episodes\": {\"k_shot\": 1}}")
    p.add_argument("--top", type=int, default=None, help="only the first N architectures")

    p = sub.add_parser("plot", help="EMA reward curve from a transitions.jsonl")
    p.add_argument("log", help="transitions.jsonl")
    p.add_argument("--format", choices=("table", "svg"), default="table")
    p.add_argument("--decay", type=float, default=0.95, help="EMA decay (default 0.95)")
    p.add_argument("--output", help="write here instead of stdout")

    p = sub.add_parser("config", help="print the default config as JSON")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _select(archs, top):
    if top is not None:
        if top < 0:
            raise UsageError(f"--top must be >= 0, got {top}")
        archs = archs[:top]
    return archs


def run(args) -> int:
    started = time.time()
    if args.command == "config":
        print(json.dumps(config_mod.default_dict(args.seed), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command == "plot":
        if not 0.0 <= args.decay < 1.0:
            raise UsageError(f"--decay must lie in [0, 1), got {args.decay}")
        rows = ema_table(args.log, args.decay)
        text = render_table(rows) if args.format == "table" else render_svg(rows)
        if args.output:
            Path(args.output).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK

    patch = None
    if args.command == "transfer":
        patch = config_mod.read_json(args.task)
        if not isinstance(patch, dict):
            raise InvalidConfigError(f"{args.task}: task config must be a JSON object")
    base = config_mod.read_json(args.config) if args.config else {}
    if patch:
        base = config_mod.merge(base, patch)
    for text in args.overrides:
        base = config_mod.merge(base, config_mod.parse_override(text))
    cfg = config_mod.from_dict(base)

    if args.command == "search":
        out = _output_dir(cfg, args.output_dir)
        report = cmd_search(cfg, out)
        for item in report["top"]:
            print(f"{item['reward']:.4f}\t{item['arch']}")
    else:
        archs = _select(read_archs(args.archs), args.top)
        out = _output_dir(cfg, args.output_dir)
        rows = cmd_retrain(cfg, archs, out)
        for row in rows:
            print(f"{row['test_accuracy']:.4f}\t{row['arch']}")
    _write_run_meta(out, args.command, started)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (InvalidConfigError, UsageError) as exc:
        print(f"metanas: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MetaNASError, OSError) as exc:
        print(f"metanas: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
