"""Experiment orchestration: build clients from a config, run, and persist metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as config_mod
from . import rng as rng_mod
from .config import ConfigError, ExperimentConfig
from .conformal import coverage_curve
from .data import (Dataset, SplitSpec, dirichlet_partition, generate_synthetic,
                   holdout_indices, load_csv, split, write_manifest)
from .engine import FEDAVG, FEDPVR, FederatedEngine, RoundRecord, Strategy, comm_ratio
from .metrics import DEGENERATE, NOT_REACHED, client_cka, rounds_to_target, speedup
from .objectives import MlpArchitecture, MlpObjective, QuadraticObjective, optimum
from .params import LayerLayout, mask_from_layer_cutoff

log = logging.getLogger(__name__)

METRICS_VERSION = 1


def make_schedule(cfg: ExperimentConfig) -> Callable[[int], float]:
    """Local learning rate for the round with 0-based index ``r``."""
    base = cfg.strategy.local_lr
    sch = cfg.schedule
    total = cfg.rounds
    if sch.kind == "constant":
        return lambda r: base
    if sch.kind == "cosine":
        return lambda r: base * (1.0 + math.cos(math.pi * r / total)) / 2.0
    if sch.kind == "multistep":
        milestones = list(sch.milestones)
        return lambda r: base * sch.factor ** sum(r >= m for m in milestones)
    raise ConfigError([f"schedule.kind: unknown {sch.kind!r}"])


@dataclass
class Experiment:
    """Everything needed to run: client objectives, initial model and evaluators."""

    config: ExperimentConfig
    objectives: list
    x0: np.ndarray
    layout: LayerLayout
    evaluator: Callable[[np.ndarray], dict]
    manifest: dict
    client_steps: list[int]
    arch: MlpArchitecture | None = None
    test: Dataset | None = None
    calibration: Dataset | None = None
    probe: np.ndarray | None = None
    x_star: np.ndarray | None = None


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "csv":
        return load_csv(d.csv_path, d.label_column, d.feature_columns)
    return generate_synthetic(d.n_classes, d.clusters_per_class, d.dim, d.n_samples,
                              d.noise, cfg.seeds.data, separation=d.separation)


def quadratic_ensemble(cfg: ExperimentConfig) -> tuple[list[QuadraticObjective], LayerLayout]:
    """Diagonal quadratics whose heterogeneity sits on layers >= ``quadratic_hetero_from``."""
    m = cfg.model
    layout = LayerLayout.from_lengths(m.quadratic_layers)
    rng = rng_mod.stream(cfg.seeds.data, 0)
    d = layout.total_dim
    hetero_start = (layout.layers[m.quadratic_hetero_from].offset
                    if m.quadratic_hetero_from < len(layout) else d)
    shared_a = rng.uniform(1.0, 2.0, d)
    shared_b = rng.normal(0.0, 1.0, d)
    objectives = []
    for _ in range(cfg.num_clients):
        a = shared_a.copy()
        b = shared_b.copy()
        n_het = d - hetero_start
        a[hetero_start:] = rng.uniform(0.5, 4.0, n_het)
        b[hetero_start:] = rng.normal(0.0, 2.0, n_het)
        objectives.append(QuadraticObjective(a, b, noise_std=m.quadratic_noise, layout=layout))
    return objectives, layout


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    cfg.validate()
    s = cfg.strategy
    if cfg.model.kind == "quadratic":
        objectives, layout = quadratic_ensemble(cfg)
        x_star = optimum(objectives)
        f_star = float(np.mean([o.loss(x_star) for o in objectives]))

        def evaluate(x):
            gap = float(np.mean([o.loss(x) for o in objectives])) - f_star
            return {"test_loss": gap, "dist_sq": float(np.sum((x - x_star) ** 2))}

        manifest = {"kind": "quadratic", "seeds": {"data": cfg.seeds.data},
                    "layers": list(cfg.model.quadratic_layers),
                    "num_clients": cfg.num_clients}
        return Experiment(cfg, objectives, np.zeros(layout.total_dim), layout, evaluate,
                          manifest, [s.local_steps] * cfg.num_clients, x_star=x_star)

    ds = _load_dataset(cfg)
    parts = split(ds, SplitSpec(0.0, cfg.data.calibration_count, cfg.data.test_fraction),
                  cfg.seeds.data)
    train, test = parts.train, parts.test
    plan = dirichlet_partition(train, cfg.num_clients, cfg.alpha, cfg.seeds.partition)
    arch = MlpArchitecture(ds.n_features, tuple(cfg.model.hidden), ds.n_classes)
    objectives, steps, val_idx = [], [], []
    for i, shard in enumerate(plan.client_shards):
        keep, held = holdout_indices(
            shard, cfg.data.validation_fraction,
            rng_mod.stream(cfg.seeds.partition, rng_mod.HOLDOUT, i))
        if keep.size == 0:
            keep, held = shard, held[:0]
        val_idx.append(held)
        objectives.append(MlpObjective(arch, train.features[keep], train.labels[keep]))
        if s.local_epochs is not None:
            steps.append(s.local_epochs * math.ceil(keep.size / min(s.batch_size, keep.size)))
        else:
            steps.append(s.local_steps)
    calibration = parts.calibration
    pooled = np.sort(np.concatenate(val_idx))
    if calibration is None and pooled.size:
        calibration = train.subset(pooled)
    x0 = arch.init(rng_mod.stream(cfg.seeds.init, rng_mod.INIT))

    def evaluate(x):
        probs = arch.predict_proba(x, test.features)
        picked = probs[np.arange(len(test)), test.labels]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        acc = float(np.mean(probs.argmax(axis=1) == test.labels))
        return {"test_loss": loss, "test_accuracy": acc}

    probe_rng = rng_mod.stream(cfg.seeds.data, rng_mod.PROBE)
    n_probe = min(cfg.metrics.cka_probe_size, len(test))
    probe = test.features[np.sort(probe_rng.choice(len(test), n_probe, replace=False))]
    manifest = {
        "kind": "dataset",
        "provenance": ds.provenance,
        "seeds": {"data": cfg.seeds.data, "partition": cfg.seeds.partition},
        "alpha": cfg.alpha,
        "split_indices": {k: v.tolist() for k, v in parts.indices.items()},
        "partition": plan.to_dict(),
        "validation_indices": [v.tolist() for v in val_idx],
        "client_steps": steps,
    }
    return Experiment(cfg, objectives, x0, arch.layout, evaluate, manifest, steps,
                      arch=arch, test=test, calibration=calibration, probe=probe)


def make_strategy(cfg: ExperimentConfig, layout: LayerLayout) -> Strategy:
    s = cfg.strategy
    mask = mask_from_layer_cutoff(layout, s.mask_cutoff) if s.kind == FEDPVR else None
    return Strategy(s.kind, s.local_lr, s.local_steps or 1, s.global_lr, s.batch_size,
                    s.momentum, s.prox_mu, mask)


@dataclass
class RunLog:
    config: dict
    manifest: dict
    rows: list[dict]
    diversity: list[dict]
    cka: list[dict] = field(default_factory=list)
    coverage: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    final_model: np.ndarray | None = None
    records: list[RoundRecord] = field(default_factory=list, repr=False)

    def values(self, key: str) -> list:
        return [row.get(key) for row in self.rows]


def _xi_value(value):
    return "degenerate" if value == DEGENERATE else value


def _round_row(record: RoundRecord, cfg: ExperimentConfig) -> dict:
    row = {
        "round": record.round,
        "local_lr": record.local_lr,
        "train_loss": record.train_loss,
        "test_loss": record.test_loss,
        "test_accuracy": record.test_accuracy,
        "params_down": record.params_down,
        "params_up": record.params_up,
    }
    if cfg.metrics.client_drift:
        row["client_drift"] = record.client_drift
    if cfg.metrics.drift_diversity:
        row["xi"] = _xi_value(record.diversity.xi_global)
    for key in sorted(record.extra):
        row[key] = record.extra[key]
    if cfg.metrics.record_wall_time:
        row["wall_time"] = record.wall_time
    return row


def run(cfg: ExperimentConfig, experiment: Experiment | None = None) -> RunLog:
    """Run all rounds of ``cfg`` and collect the metrics into a :class:`RunLog`."""
    experiment = experiment or build_experiment(cfg)
    strategy = make_strategy(cfg, experiment.layout)
    cka_rounds = set(cfg.metrics.cka_rounds)
    engine = FederatedEngine(
        experiment.objectives, strategy, experiment.x0, seed=cfg.seeds.sampling,
        evaluator=experiment.evaluator, layout=experiment.layout,
        keep_models=True, keep_deltas=bool(cka_rounds), workers=cfg.workers,
        client_steps=experiment.client_steps,
    )
    schedule = make_schedule(cfg)
    rows, diversity, cka = [], [], []
    prev = experiment.x0

    def on_round(record: RoundRecord):
        nonlocal prev
        rows.append(_round_row(record, cfg))
        if cfg.metrics.drift_diversity:
            rep = record.diversity
            diversity.append({"round": record.round, "layer": "__all__", "xi": _xi_value(rep.xi_global)})
            for name, value in rep.xi_per_layer.items():
                diversity.append({"round": record.round, "layer": name, "xi": _xi_value(value)})
        if record.round in cka_rounds:
            models = [prev + m for m in record.deltas]
            report = client_cka(experiment.arch, models, experiment.probe)
            for name in report.layers:
                mat = report.matrices[name]
                for a in range(len(models)):
                    for b in range(a + 1, len(models)):
                        cka.append({"round": record.round, "layer": name,
                                    "client_a": a, "client_b": b, "cka": float(mat[a, b])})
        record.deltas = None
        prev = record.model
        log.debug("round %d: train_loss=%.4g test=%s", record.round, record.train_loss,
                  record.test_accuracy if record.test_accuracy is not None else record.test_loss)

    records = engine.run(cfg.rounds, schedule, on_round)
    final = engine.x.copy()

    coverage = []
    if cfg.metrics.conformal_kappas:
        coverage = conformal_table(experiment, final, cfg.metrics.conformal_kappas,
                                   cfg.metrics.conformal_include_argmax)

    summary = summarize(cfg, rows, experiment.layout.total_dim, strategy)
    return RunLog(config_mod.to_dict(cfg), experiment.manifest, rows, diversity, cka,
                  coverage, summary, final, records)


def conformal_table(experiment: Experiment, model: np.ndarray, kappas: Sequence[float],
                    include_argmax: bool = False) -> list[dict]:
    if experiment.arch is None:
        raise ConfigError(["conformal prediction needs a classifier"])
    cal = experiment.calibration
    if cal is None or len(cal) == 0:
        raise ConfigError(["conformal prediction needs a non-empty calibration set "
                           "(data.calibration_count or data.validation_fraction)"])
    arch, test = experiment.arch, experiment.test
    cal_probs = arch.predict_proba(model, cal.features)[np.arange(len(cal)), cal.labels]
    test_probs = arch.predict_proba(model, test.features)
    curve = coverage_curve(test_probs, test.labels, cal_probs, kappas, include_argmax)
    return [{"kappa": k, "coverage": c, "avg_set_size": s} for k, c, s in curve]


def summarize(cfg: ExperimentConfig, rows: list[dict], d: int, strategy: Strategy) -> dict:
    summary = {
        "rounds": len(rows),
        "final_train_loss": rows[-1]["train_loss"],
        "final_test_loss": rows[-1]["test_loss"],
        "final_test_accuracy": rows[-1]["test_accuracy"],
        "params_transmitted": sum(r["params_down"] + r["params_up"] for r in rows),
        "comm_ratio": comm_ratio(strategy, d),
    }
    if cfg.target_accuracy is not None:
        summary["rounds_to_target"] = rounds_to_target(
            [r["test_accuracy"] for r in rows], cfg.target_accuracy)
    elif cfg.target_error is not None:
        summary["rounds_to_target"] = rounds_to_target(
            [r["test_loss"] for r in rows], cfg.target_error, higher_is_better=False)
    return summary


# ---------------------------------------------------------------------------
# persistence

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(kind: str, rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    buf.write(f"# fedpvr {kind} v{METRICS_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


def _jsonl(event: str, payload: dict) -> str:
    body = _jsonable({"event": event, **payload})
    return json.dumps(body, sort_keys=True, default=_json_default, allow_nan=False) + "\n"


def emit_plot_data(log_: RunLog, kind: str, out_dir) -> Path:
    """Write one plot-ready CSV: ``accuracy``, ``diversity``, ``cka`` or ``coverage``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "accuracy":
        text = _csv_text(kind, log_.rows)
    elif kind == "diversity":
        text = _csv_text(kind, log_.diversity, ["round", "layer", "xi"])
    elif kind == "cka":
        text = _csv_text(kind, log_.cka, ["round", "layer", "client_a", "client_b", "cka"])
    elif kind == "coverage":
        text = _csv_text(kind, log_.coverage, ["kappa", "coverage", "avg_set_size"])
    else:
        raise ValueError(f"unknown plot data kind {kind!r}")
    path = out_dir / f"{kind}.csv"
    path.write_text(text, encoding="utf-8")
    return path


def write_run(log_: RunLog, out_dir) -> Path:
    """Persist config.json, manifest.json, run_log.jsonl, model.npy and metrics/*.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = config_mod.from_dict(log_.config)
    config_mod.save(cfg, out_dir / "config.json")
    write_manifest(out_dir / "manifest.json", **log_.manifest)
    with (out_dir / "run_log.jsonl").open("w", encoding="utf-8") as fh:
        fh.write(_jsonl("config", {"config": log_.config, "metrics_version": METRICS_VERSION}))
        for row in log_.rows:
            fh.write(_jsonl("round", row))
        for row in log_.coverage:
            fh.write(_jsonl("conformal", row))
        fh.write(_jsonl("summary", log_.summary))
    np.save(out_dir / "model.npy", log_.final_model)
    metrics_dir = out_dir / "metrics"
    emit_plot_data(log_, "accuracy", metrics_dir)
    if log_.diversity:
        emit_plot_data(log_, "diversity", metrics_dir)
    if log_.cka:
        emit_plot_data(log_, "cka", metrics_dir)
    if log_.coverage:
        emit_plot_data(log_, "coverage", metrics_dir)
    return out_dir


def conformal_from_run(run_dir, kappas: Sequence[float], include_argmax: bool = False) -> list[dict]:
    """Recompute coverage for a finished run from its config and saved model."""
    run_dir = Path(run_dir)
    cfg = config_mod.load(run_dir / "config.json")
    model = np.load(run_dir / "model.npy")
    experiment = build_experiment(cfg)
    return conformal_table(experiment, model, kappas, include_argmax)


# ---------------------------------------------------------------------------
# sweeps and comparisons

def _progress(log_: RunLog, cfg: ExperimentConfig) -> dict:
    return {
        "rounds_to_target": log_.summary.get("rounds_to_target", NOT_REACHED),
        "final_test_accuracy": log_.summary["final_test_accuracy"],
        "final_test_loss": log_.summary["final_test_loss"],
        "comm_ratio": log_.summary["comm_ratio"],
        "params_per_round": log_.rows[0]["params_down"] + log_.rows[0]["params_up"],
    }


def sweep_mask_cutoff(base: ExperimentConfig, cutoffs: Sequence[int]) -> tuple[list[dict], list[RunLog]]:
    """One FedPVR run per cutoff on shared data; cutoff 0 is SCAFFOLD, cutoff L is FedAvg."""
    n_layers = base.n_layers()
    experiment = None
    table, logs = [], []
    for cutoff in cutoffs:
        if not 0 <= cutoff <= n_layers:
            raise ConfigError([f"cutoff {cutoff} not in [0, {n_layers}]"])
        cfg = config_mod.replace(base, **{"strategy.kind": FEDPVR, "strategy.mask_cutoff": cutoff,
                                          "strategy.prox_mu": 0.0})
        if experiment is None:
            experiment = build_experiment(cfg)
        else:
            experiment.config = cfg
        run_log = run(cfg, experiment)
        logs.append(run_log)
        label = "SCAFFOLD" if cutoff == 0 else ("FedAvg" if cutoff == n_layers else f"SVR:{cutoff}->{n_layers - 1}")
        table.append({"cutoff": cutoff, "label": label, **_progress(run_log, cfg)})
    return table, logs


def compare_strategies(configs: Sequence[ExperimentConfig]) -> tuple[list[dict], list[RunLog]]:
    """Rounds-to-target and speedup over the FedAvg run; data settings must match."""
    if not configs:
        raise ConfigError(["nothing to compare"])
    ident = configs[0].data_identity()
    bad = [c.name for c in configs[1:] if c.data_identity() != ident]
    if bad:
        raise ConfigError([f"runs {bad} use different data/partition settings; comparison invalid"])
    logs = [run(cfg) for cfg in configs]
    baseline = next((lg.summary.get("rounds_to_target", NOT_REACHED)
                     for cfg, lg in zip(configs, logs) if cfg.strategy.kind == FEDAVG), NOT_REACHED)
    table = []
    for cfg, lg in zip(configs, logs):
        row = {"name": cfg.name, "kind": cfg.strategy.kind, **_progress(lg, cfg)}
        row["speedup"] = speedup(baseline, row["rounds_to_target"])
        table.append(row)
    return table, logs


def table_csv(rows: list[dict]) -> str:
    return _csv_text("table", rows)
