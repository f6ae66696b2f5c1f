"""Command-line entry point: ``ringfed run`` and ``ringfed sweep``.

Configuration comes from an optional ``key = value`` file (``--config``) with
command-line flags taking precedence.  Keys are ``RunConfig`` field names or
the long flag names (``select-frac``, ``dataset-images``, ...).

Momentum note: a momentum of exactly 1.0 is read as "no momentum" (plain
SGD), so the tuning grid {0.9, 1.0} compares momentum SGD against plain SGD.

Exit codes: 0 success, 1 usage error, 2 data ingestion error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import load_idx
from .errors import ConfigurationError, IngestionError, RingFedError
from .metrics import emit, summarize
from .orchestrator import ALGORITHMS, RunConfig, run_experiment

log = logging.getLogger("ringfed")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

# flag/config-key spellings that differ from RunConfig field names
ALIASES = {
    "dataset_images": "train_images",
    "dataset_labels": "train_labels",
    "clients": "num_clients",
}

_INT_FIELDS = {"num_clients", "rounds", "epochs", "periods", "batch_size", "shards_per_client",
               "hidden_dim", "seed", "tail_window"}
_FLOAT_FIELDS = {"select_frac", "gamma", "lr", "momentum", "lr_decay", "alpha", "mu", "server_lr"}
_BOOL_FIELDS = {"exchange_final_period", "weighted_average"}
_OPTIONAL_INT = {"train_limit"}
_OPTIONAL_FLOAT = {"target_accuracy"}


class UsageError(ConfigurationError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def canonical_key(key: str) -> str:
    name = key.strip().lstrip("-").replace("-", "_")
    name = ALIASES.get(name, name)
    if name not in RunConfig.field_names():
        raise UsageError(f"unknown configuration key {key!r}")
    return name


def coerce(name: str, value):
    """Convert a raw config value (usually a string) to the field's type."""
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if name in _INT_FIELDS:
            return int(text)
        if name in _FLOAT_FIELDS:
            return float(text)
        if name in _BOOL_FIELDS:
            return _parse_bool(text)
        if name in _OPTIONAL_INT:
            return None if text.lower() in ("", "none") else int(text)
        if name in _OPTIONAL_FLOAT:
            return None if text.lower() in ("", "none") else float(text)
    except ValueError as exc:
        raise UsageError(f"{name}: cannot parse {value!r} ({exc})") from exc
    return text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        name = canonical_key(key)
        values[name] = coerce(name, value)
    return values


def build_config(values: dict, require_data: bool = True) -> RunConfig:
    values = {canonical_key(k): coerce(canonical_key(k), v) for k, v in values.items()}
    if require_data:
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if not values.get(name):
                raise UsageError(f"{name}: dataset path is required")
    try:
        return RunConfig(**values)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="key = value configuration file; flags override it")
    p.add_argument("--algorithm", choices=ALGORITHMS, default=S)
    p.add_argument("--dataset-images", dest="train_images", default=S)
    p.add_argument("--dataset-labels", dest="train_labels", default=S)
    p.add_argument("--test-images", default=S)
    p.add_argument("--test-labels", default=S)
    p.add_argument("--dataset", default=S, help="dataset name, selects the default target (mnist, fmnist)")
    p.add_argument("--train-limit", default=S, help="use only the first N training examples")
    p.add_argument("--clients", dest="num_clients", default=S)
    p.add_argument("--select-frac", default=S)
    p.add_argument("--rounds", default=S)
    p.add_argument("--epochs", default=S)
    p.add_argument("--periods", default=S, help="RingFed periods per round; P periods make P-1 exchanges")
    p.add_argument("--gamma", default=S)
    p.add_argument("--partition", choices=("iid", "pathological", "dirichlet"), default=S)
    p.add_argument("--alpha", default=S)
    p.add_argument("--shards-per-client", default=S)
    p.add_argument("--model", choices=("mlp", "logistic"), default=S)
    p.add_argument("--hidden-dim", default=S)
    p.add_argument("--lr", default=S)
    p.add_argument("--momentum", default=S, help="1.0 means plain SGD (no momentum)")
    p.add_argument("--lr-decay", default=S)
    p.add_argument("--batch-size", default=S)
    p.add_argument("--mu", default=S, help="FedProx proximal coefficient")
    p.add_argument("--server-lr", default=S, help="SCAFFOLD server learning rate")
    p.add_argument("--seed", default=S)
    p.add_argument("--target-accuracy", default=S)
    p.add_argument("--tail-window", default=S)
    p.add_argument("--exchange-semantics", choices=("snapshot", "sequential"), default=S)
    p.add_argument("--exchange-final-period", action="store_const", const="true", default=S,
                   help="also exchange after the last period")
    p.add_argument("--ring-order", choices=("ascending", "shuffled"), default=S)
    p.add_argument("--weighted-average", action="store_const", const="true", default=S)
    p.add_argument("-v", "--verbose", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ringfed", description="Federated learning simulator (FedAvg, RingFed, FedProx, SCAFFOLD)")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    _add_run_flags(run)
    run.add_argument("--out", help="report path")
    run.add_argument("--format", choices=("csv", "json"), help="report format (default: from --out suffix)")
    sweep = sub.add_parser("sweep", help="run a hyperparameter grid")
    _add_run_flags(sweep)
    sweep.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...")
    sweep.add_argument("--tuning-grid", action="store_true", help="add the lr x momentum x lr-decay tuning grid")
    sweep.add_argument("--out", required=True, help="output directory")
    sweep.add_argument("--parallel", type=int, default=1)
    return parser


RUN_ONLY = {"config", "verbose", "out", "format", "command", "grid", "tuning_grid", "parallel"}


def parse_config(argv: list[str] | None = None) -> RunConfig:
    """Resolve a RunConfig for ``ringfed run`` arguments (file values, then flags)."""
    args = make_parser().parse_args(["run", *(argv or [])])
    return _resolve(args)


def _resolve(args: argparse.Namespace, require_data: bool = True) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for name, value in vars(args).items():
        if name not in RUN_ONLY:
            values[name] = value
    return build_config(values, require_data)


# -- sweeps -----------------------------------------------------------------

TUNING_GRID = {
    "lr": [1e-4, 5e-4, 1e-3, 5e-3],
    "momentum": [0.9, 1.0],
    "lr_decay": [0.98, 0.99, 1.0],
}


@dataclass
class SweepSpec:
    base: RunConfig
    grid: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        self.grid = {canonical_key(k): [coerce(canonical_key(k), v) for v in vs] for k, vs in self.grid.items()}
        for k, vs in self.grid.items():
            if not vs:
                raise UsageError(f"grid key {k!r} has no values")

    def __len__(self) -> int:
        return int(np.prod([len(v) for v in self.grid.values()])) if self.grid else 1

    def points(self) -> list[dict]:
        keys = list(self.grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grid[k] for k in keys))]


def derive_seed(base_seed: int, index: int) -> int:
    """Seed for grid point ``index``; a pure function of its two arguments."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


@lru_cache(maxsize=4)
def _datasets(train_images, train_labels, test_images, test_labels):
    train = load_idx(train_images, train_labels)
    return train, load_idx(test_images, test_labels, num_classes=train.num_classes)


def _run_point(cfg: RunConfig, out_dir: str, index: int) -> dict:
    row = {"index": index, "algorithm": cfg.algorithm, "seed": cfg.seed}
    try:
        train, test = _datasets(cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels)
        metrics = run_experiment(cfg, train, test)
        summary = summarize(metrics, cfg.resolved_target, cfg.tail_window)
        emit(metrics, Path(out_dir) / f"run_{index:03d}.json", "json", summary)
        row.update(status="ok", rnd_to_target=summary.rnd_to_target, max_accuracy=summary.max_accuracy,
                   tail_mean=summary.tail_mean, tail_stdev=summary.tail_stdev)
    except RingFedError as exc:
        row.update(status=f"failed: {exc}")
    return row


def run_sweep(spec: SweepSpec, out_dir, parallel: int = 1) -> list[dict]:
    """Run every grid point and write ``summary.csv`` and ``best.csv`` to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = spec.points()
    log.info("sweep of %d runs", len(points))
    configs = []
    for i, point in enumerate(points):
        overrides = dict(point)
        base_seed = overrides.pop("seed", spec.base.seed)
        try:
            configs.append(replace(spec.base, **overrides, seed=derive_seed(base_seed, i)))
        except ConfigurationError as exc:
            raise UsageError(f"grid point {point}: {exc}") from exc
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_run_point, configs, [str(out_dir)] * len(configs), range(len(configs))))
    else:
        rows = [_run_point(cfg, str(out_dir), i) for i, cfg in enumerate(configs)]
    for row, point in zip(rows, points):
        row.update(point)

    columns = ["index", "algorithm", "seed", *[k for k in spec.grid if k not in ("algorithm", "seed")],
               "status", "rnd_to_target", "max_accuracy", "tail_mean", "tail_stdev"]
    _write_rows(out_dir / "summary.csv", columns, rows)
    best = {}
    for row in rows:
        if row["status"] == "ok":
            cur = best.get(row["algorithm"])
            if cur is None or row["tail_mean"] > cur["tail_mean"]:
                best[row["algorithm"]] = row
    _write_rows(out_dir / "best.csv", columns, [best[a] for a in sorted(best)])
    (out_dir / "base_config.json").write_text(json.dumps(spec.base.to_dict(), indent=2))
    return rows


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def _parse_grid(items: list[str], tuning: bool) -> dict[str, list[str]]:
    grid: dict[str, list] = dict(TUNING_GRID) if tuning else {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        key, values = item.split("=", 1)
        grid[key.strip()] = [v for v in values.split(",") if v.strip()]
    return grid


def _report_format(out: str | None, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "json" if out and out.endswith(".json") else "csv"


def main(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _resolve(args)
        print(json.dumps({"resolved_config": cfg.to_dict()}, indent=2), file=sys.stderr)
        if args.command == "sweep":
            spec = SweepSpec(cfg, _parse_grid(args.grid, args.tuning_grid))
            print(f"sweep: {len(spec)} runs", file=sys.stderr)
            rows = run_sweep(spec, args.out, args.parallel)
            failed = sum(r["status"] != "ok" for r in rows)
            print(f"{len(rows) - failed} runs ok, {failed} failed; summary in {Path(args.out) / 'summary.csv'}")
            return EXIT_OK

        metrics = run_experiment(cfg)
        summary = summarize(metrics, cfg.resolved_target, cfg.tail_window)
        if args.out:
            emit(metrics, args.out, _report_format(args.out, args.format), summary)
        print(f"rounds_to_{cfg.resolved_target:g}={summary.rnd_to_target} max_accuracy={summary.max_accuracy:.4f} "
              f"tail_mean={summary.tail_mean:.4f} tail_stdev={summary.tail_stdev:.4f} (window {summary.window})")
        return EXIT_OK
    except UsageError as exc:
        print(f"ringfed: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IngestionError as exc:
        print(f"ringfed: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"ringfed: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RingFedError as exc:
        print(f"ringfed: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
