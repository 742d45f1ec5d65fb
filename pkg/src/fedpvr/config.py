"""Experiment configuration: JSON files mapped onto nested dataclasses.

The file format is JSON with the same nesting as :class:`ExperimentConfig`.
Missing keys take their defaults; unknown keys are rejected. ``dumps`` writes
sorted keys with two-space indentation and a trailing newline, so
``dumps(loads(dumps(cfg))) == dumps(cfg)``.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .engine import FEDPVR, KINDS

SCHEDULES = ("constant", "cosine", "multistep")


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class DataConfig:
    source: str = "synthetic"
    n_classes: int = 10
    clusters_per_class: int = 1
    dim: int = 20
    n_samples: int = 6000
    noise: float = 1.0
    separation: float = 3.0
    csv_path: str | None = None
    label_column: str = "label"
    feature_columns: list[str] | None = None
    test_fraction: float = 0.2
    validation_fraction: float = 0.01
    calibration_count: int = 0


@dataclass
class ModelConfig:
    """``mlp`` trains on the dataset; ``quadratic`` builds a synthetic ensemble.

    The quadratic ensemble is diagonal with layer lengths ``quadratic_layers``;
    clients share curvature and linear terms on layers before
    ``quadratic_hetero_from`` and differ on the rest.
    """

    kind: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [32])
    quadratic_layers: list[int] = field(default_factory=lambda: [6, 4])
    quadratic_hetero_from: int = 1
    quadratic_noise: float = 0.0


@dataclass
class StrategyConfig:
    kind: str = "fedavg"
    local_lr: float = 0.1
    global_lr: float = 1.0
    local_steps: int | None = 10
    local_epochs: int | None = None
    batch_size: int = 32
    mask_cutoff: int | None = None
    momentum: float = 0.0
    prox_mu: float = 0.0


@dataclass
class ScheduleConfig:
    kind: str = "constant"
    milestones: list[int] = field(default_factory=list)
    factor: float = 0.1


@dataclass
class SeedConfig:
    data: int = 0
    partition: int = 0
    init: int = 0
    sampling: int = 0


@dataclass
class MetricsConfig:
    drift_diversity: bool = True
    client_drift: bool = True
    cka_rounds: list[int] = field(default_factory=list)
    cka_probe_size: int = 256
    conformal_kappas: list[float] = field(default_factory=list)
    conformal_include_argmax: bool = False
    record_wall_time: bool = False


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    num_clients: int = 10
    alpha: float = 0.1
    rounds: int = 50
    target_accuracy: float | None = None
    target_error: float | None = None
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def n_layers(self) -> int | None:
        if self.model.kind == "quadratic":
            return len(self.model.quadratic_layers)
        if self.model.kind == "mlp":
            return len(self.model.hidden) + 1
        return None

    def validate(self) -> "ExperimentConfig":
        problems = []
        s, m, d, sch = self.strategy, self.model, self.data, self.schedule
        if self.num_clients < 1:
            problems.append("num_clients: must be >= 1")
        if self.alpha <= 0:
            problems.append("alpha: must be > 0")
        if self.rounds < 1:
            problems.append("rounds: must be >= 1")
        if self.workers < 1:
            problems.append("workers: must be >= 1")
        if m.kind not in ("mlp", "quadratic"):
            problems.append(f"model.kind: unknown {m.kind!r}")
        if m.kind == "mlp" and (not m.hidden or any(h < 1 for h in m.hidden)):
            problems.append("model.hidden: need one or more positive widths")
        if m.kind == "quadratic":
            if not m.quadratic_layers or any(n < 1 for n in m.quadratic_layers):
                problems.append("model.quadratic_layers: need positive lengths")
            if not 0 <= m.quadratic_hetero_from <= len(m.quadratic_layers):
                problems.append("model.quadratic_hetero_from: layer index out of range")
            if m.quadratic_noise < 0:
                problems.append("model.quadratic_noise: must be >= 0")
        if d.source not in ("synthetic", "csv"):
            problems.append(f"data.source: unknown {d.source!r}")
        if d.source == "csv" and not d.csv_path:
            problems.append("data.csv_path: required for csv data")
        for name in ("test_fraction", "validation_fraction"):
            if not 0 <= getattr(d, name) < 1:
                problems.append(f"data.{name}: must be in [0, 1)")
        if m.kind == "mlp" and d.test_fraction == 0:
            problems.append("data.test_fraction: the server needs a test set")
        if d.calibration_count < 0:
            problems.append("data.calibration_count: must be >= 0")
        if s.kind not in KINDS:
            problems.append(f"strategy.kind: unknown {s.kind!r}")
        if s.local_lr <= 0:
            problems.append("strategy.local_lr: must be > 0")
        if s.global_lr < 1:
            problems.append("strategy.global_lr: must be >= 1")
        if (s.local_steps is None) == (s.local_epochs is None):
            problems.append("strategy: set exactly one of local_steps and local_epochs")
        for name in ("local_steps", "local_epochs"):
            value = getattr(s, name)
            if value is not None and value < 1:
                problems.append(f"strategy.{name}: must be >= 1")
        if s.local_epochs is not None and m.kind == "quadratic":
            problems.append("strategy.local_epochs: quadratic ensembles have no shards; use local_steps")
        if s.batch_size < 1:
            problems.append("strategy.batch_size: must be >= 1")
        if not 0 <= s.momentum < 1:
            problems.append("strategy.momentum: must be in [0, 1)")
        if s.prox_mu < 0 or (s.prox_mu and s.kind != "fedprox"):
            problems.append("strategy.prox_mu: nonnegative, and only for fedprox")
        n_layers = self.n_layers()
        if s.kind == FEDPVR:
            if s.mask_cutoff is None:
                problems.append("strategy.mask_cutoff: required for fedpvr")
            elif n_layers is not None and not 0 <= s.mask_cutoff <= n_layers:
                problems.append(f"strategy.mask_cutoff: layer {s.mask_cutoff} not in [0, {n_layers}]")
        elif s.mask_cutoff is not None:
            problems.append(f"strategy.mask_cutoff: only valid for fedpvr, not {s.kind}")
        if sch.kind not in SCHEDULES:
            problems.append(f"schedule.kind: unknown {sch.kind!r}")
        if sch.kind == "multistep":
            if not sch.milestones or any(b <= a for a, b in zip(sch.milestones, sch.milestones[1:])):
                problems.append("schedule.milestones: need a strictly increasing list")
            if any(x < 1 for x in sch.milestones):
                problems.append("schedule.milestones: must be positive rounds")
            if not 0 < sch.factor <= 1:
                problems.append("schedule.factor: must be in (0, 1]")
        for k in self.metrics.conformal_kappas:
            if not 0 < k < 1:
                problems.append(f"metrics.conformal_kappas: {k} not in (0, 1)")
        if self.metrics.conformal_kappas and m.kind != "mlp":
            problems.append("metrics.conformal_kappas: needs a classifier (model.kind = mlp)")
        if any(r < 1 or r > self.rounds for r in self.metrics.cka_rounds):
            problems.append("metrics.cka_rounds: rounds must lie in [1, rounds]")
        if self.metrics.cka_rounds and m.kind != "mlp":
            problems.append("metrics.cka_rounds: CKA needs an MLP")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            problems.append("target_accuracy: must be in (0, 1]")
        if self.target_error is not None and self.target_error <= 0:
            problems.append("target_error: must be > 0")
        for name in ("data", "partition", "init", "sampling"):
            if getattr(self.seeds, name) < 0:
                problems.append(f"seeds.{name}: must be >= 0")
        if problems:
            raise ConfigError(problems)
        return self

    def data_identity(self) -> dict:
        """Everything that determines the data and its partition."""
        return {
            "data": dataclasses.asdict(self.data),
            "num_clients": self.num_clients,
            "alpha": self.alpha,
            "seeds.data": self.seeds.data,
            "seeds.partition": self.seeds.partition,
            "model.kind": self.model.kind,
        }


def _build(cls, payload, path: str, problems: list[str]):
    if not isinstance(payload, dict):
        problems.append(f"{path or 'config'}: expected an object")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(payload) - names):
        problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in payload:
            continue
        value = payload[f.name]
        hint = hints[f.name]
        where = f"{path + '.' if path else ''}{f.name}"
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, where, problems)
            continue
        ok = _type_ok(hint, value)
        if not ok:
            problems.append(f"{where}: {value!r} does not match {hint}")
            continue
        if _is_float_hint(hint) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def _is_float_hint(hint) -> bool:
    return hint is float or float in typing.get_args(hint)


def _type_ok(hint, value) -> bool:
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        return any(_type_ok(h, value) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is list:
        (item,) = typing.get_args(hint)
        return isinstance(value, list) and all(_type_ok(item, v) for v in value)
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    return False


def from_dict(payload: dict) -> ExperimentConfig:
    problems: list[str] = []
    cfg = _build(ExperimentConfig, payload, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg.validate()


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, indent=2) + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    return from_dict(payload)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy with dotted-path overrides, e.g. ``replace(cfg, **{"strategy.kind": "scaffold"})``."""
    payload = to_dict(cfg)
    for dotted, value in changes.items():
        node = payload
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        if leaf not in node:
            raise ConfigError([f"{dotted}: unknown key"])
        node[leaf] = value
    return from_dict(payload)
