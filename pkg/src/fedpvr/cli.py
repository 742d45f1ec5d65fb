"""Command line entry point: ``fedpvr {run,sweep-mask,compare,conformal,preset}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import harness, presets
from .config import ConfigError
from .data import DataError
from .engine import DivergenceError


def _load(args) -> config_mod.ExperimentConfig:
    if bool(args.config) == bool(args.preset):
        raise ConfigError(["pass exactly one of --config and --preset"])
    cfg = presets.get(args.preset) if args.preset else config_mod.load(args.config)
    changes = {}
    if args.rounds is not None:
        changes["rounds"] = args.rounds
    for name in ("data", "partition", "init", "sampling"):
        value = getattr(args, f"seed_{name}")
        if value is not None:
            changes[f"seeds.{name}"] = value
    return config_mod.replace(cfg, **changes) if changes else cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(presets.PRESETS), help="built-in config")
    p.add_argument("--rounds", type=int, help="override the number of rounds")
    for name in ("data", "partition", "init", "sampling"):
        p.add_argument(f"--seed-{name}", type=int, dest=f"seed_{name}", help=f"override seeds.{name}")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_run(args) -> int:
    cfg = _load(args)
    log = harness.run(cfg)
    harness.write_run(log, args.out)
    print(json.dumps(harness._jsonable(log.summary), sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    cutoffs = args.cutoffs if args.cutoffs is not None else list(range(cfg.n_layers() + 1))
    table, logs = harness.sweep_mask_cutoff(cfg, cutoffs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cutoff, lg in zip(cutoffs, logs):
        harness.write_run(lg, out / f"cutoff_{cutoff}")
    text = harness.table_csv(table)
    (out / "sweep.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_compare(args) -> int:
    configs = [config_mod.load(p) for p in args.configs]
    if args.rounds is not None:
        configs = [config_mod.replace(c, rounds=args.rounds) for c in configs]
    table, logs = harness.compare_strategies(configs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cfg, lg in zip(configs, logs):
        harness.write_run(lg, out / cfg.name)
    text = harness.table_csv(table)
    (out / "compare.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_conformal(args) -> int:
    rows = harness.conformal_from_run(args.run_dir, args.kappas, args.include_argmax)
    out = Path(args.out) if args.out else Path(args.run_dir) / "metrics"
    log = harness.RunLog({}, {}, [], [], coverage=rows)
    path = harness.emit_plot_data(log, "coverage", out)
    sys.stdout.write(path.read_text(encoding="utf-8"))
    return 0


def cmd_preset(args) -> int:
    sys.stdout.write(config_mod.dumps(presets.get(args.name)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpvr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-mask", help="FedPVR with variance reduction from each layer cutoff")
    _add_config_args(p)
    p.add_argument("--cutoffs", type=_ints, help="comma-separated layer indices (default: all)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="rounds-to-target and speedup table")
    p.add_argument("configs", nargs="+", type=Path)
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("conformal", help="coverage vs set size for a finished run")
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--kappas", type=_floats, default=[0.05, 0.1, 0.2])
    p.add_argument("--include-argmax", action="store_true")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_conformal)

    p = sub.add_parser("preset", help="print a built-in config as JSON")
    p.add_argument("name", choices=sorted(presets.PRESETS))
    p.set_defaults(func=cmd_preset)
    return parser


def _error_record(exc: Exception) -> dict:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["problems"] = exc.problems
    if isinstance(exc, DivergenceError):
        record.update(client=exc.client, step=exc.step, round=exc.round_index)
        if exc.last_record is not None:
            last = exc.last_record
            record["last_finite_round"] = {
                "round": last.round, "train_loss": last.train_loss,
                "test_loss": last.test_loss, "test_accuracy": last.test_accuracy,
            }
    return record


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, DivergenceError, KeyError, OSError, ValueError) as exc:
        sys.stderr.write(json.dumps(_error_record(exc), sort_keys=True) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
