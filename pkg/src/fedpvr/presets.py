"""Named desk-scale experiment configurations."""

from __future__ import annotations

from .config import ExperimentConfig, from_dict, replace


def _speedup_desk() -> ExperimentConfig:
    return from_dict({
        "name": "speedup-desk",
        "num_clients": 10,
        "alpha": 0.1,
        "rounds": 30,
        "target_accuracy": 0.8,
        "data": {"n_classes": 10, "dim": 20, "n_samples": 5000, "noise": 1.0, "separation": 3.0},
        "model": {"kind": "mlp", "hidden": [32]},
        "strategy": {"kind": "fedpvr", "mask_cutoff": 1, "local_lr": 0.1,
                     "local_steps": 20, "batch_size": 32},
    })


def _quadratic_hetero() -> ExperimentConfig:
    return from_dict({
        "name": "quadratic-hetero",
        "num_clients": 5,
        "rounds": 200,
        "target_error": 1e-6,
        "model": {"kind": "quadratic", "quadratic_layers": [6, 4], "quadratic_hetero_from": 1},
        "strategy": {"kind": "fedpvr", "mask_cutoff": 1, "local_lr": 0.05, "local_steps": 5},
        "metrics": {"client_drift": True, "drift_diversity": True},
    })


def _motivation() -> ExperimentConfig:
    cfg = replace(_speedup_desk(), **{
        "name": "motivation", "strategy.kind": "fedavg", "strategy.mask_cutoff": None,
        "model.hidden": [64, 32], "target_accuracy": None,
    })
    return replace(cfg, **{"metrics.cka_rounds": [1, 10, 20, 30]})


def _conformal_desk() -> ExperimentConfig:
    return replace(_speedup_desk(), **{
        "name": "conformal-desk",
        "data.calibration_count": 500,
        "metrics.conformal_kappas": [0.02, 0.05, 0.1, 0.2, 0.3],
    })


PRESETS = {
    "speedup-desk": _speedup_desk,
    "quadratic-hetero": _quadratic_hetero,
    "motivation": _motivation,
    "conformal-desk": _conformal_desk,
}


def get(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
