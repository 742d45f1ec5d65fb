"""Split conformal prediction with a threshold on predicted class probability.

The nonconformity score of an example is ``1 - p(true class)``. Calibration
takes the ``ceil((n + 1)(1 - kappa))``-th smallest score ``q`` and a class
enters the prediction set when ``1 - p_c <= q``, i.e. ``p_c >= tau = 1 - q``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ConformalError(ValueError):
    pass


@dataclass(frozen=True)
class ConformalCalibration:
    kappa: float
    qhat: float
    n_cal: int
    include_argmax: bool = False

    @property
    def tau(self) -> float:
        return 1.0 - self.qhat

    @classmethod
    def from_threshold(cls, tau: float, kappa: float = 0.1, n_cal: int = 1,
                       include_argmax: bool = False) -> "ConformalCalibration":
        if not 0.0 <= tau <= 1.0:
            raise ConformalError("tau must lie in [0, 1]")
        return cls(kappa, 1.0 - tau, n_cal, include_argmax)


@dataclass(frozen=True)
class PredictionSet:
    classes: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.classes)

    def __contains__(self, label) -> bool:
        return int(label) in self.classes


def quantile_rank(n_cal: int, kappa: float) -> int:
    """1-based order statistic used as the score quantile (may exceed ``n_cal``)."""
    # guard against 10 * 0.9 = 9.000000000000002 style round-off
    return math.ceil((n_cal + 1) * (1.0 - kappa) - 1e-9)


def calibrate(true_class_probs, kappa: float, include_argmax: bool = False) -> ConformalCalibration:
    """Calibrate the probability threshold on held-out true-class probabilities."""
    probs = np.asarray(true_class_probs, dtype=np.float64).ravel()
    if probs.size == 0:
        raise ConformalError("calibration set is empty")
    if not 0.0 < kappa < 1.0:
        raise ConformalError("kappa must lie in (0, 1)")
    if np.any((probs < 0) | (probs > 1)) or not np.all(np.isfinite(probs)):
        raise ConformalError("probabilities must lie in [0, 1]")
    n = probs.size
    if n < math.ceil(1.0 / kappa) - 1:
        warnings.warn(
            f"{n} calibration examples is too few for kappa={kappa}; coverage guarantee is vacuous",
            stacklevel=2,
        )
    rank = quantile_rank(n, kappa)
    scores = np.sort(1.0 - probs)
    # rank > n means an infinite quantile: every class is included
    qhat = 1.0 if rank > n else float(scores[max(rank, 1) - 1])
    return ConformalCalibration(float(kappa), qhat, n, include_argmax)


def _check_probs(probs: np.ndarray) -> None:
    if probs.ndim != 1 or probs.size == 0:
        raise ConformalError("expected a non-empty probability vector")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise ConformalError("probabilities must be finite and nonnegative")
    if abs(probs.sum() - 1.0) > 1e-8:
        raise ConformalError(f"probabilities sum to {probs.sum()!r}, not 1")


def predict_set(probs, calib: ConformalCalibration) -> PredictionSet:
    probs = np.asarray(probs, dtype=np.float64)
    _check_probs(probs)
    members = set(np.flatnonzero(1.0 - probs <= calib.qhat).tolist())
    if calib.include_argmax:
        members.add(int(np.argmax(probs)))
    return PredictionSet(tuple(sorted(members)))


def _batch_sets(probs: np.ndarray, calib: ConformalCalibration) -> np.ndarray:
    inside = (1.0 - probs) <= calib.qhat
    if calib.include_argmax:
        inside[np.arange(probs.shape[0]), probs.argmax(axis=1)] = True
    return inside


def coverage_curve(test_probs, test_labels, cal_true_probs, kappas: Sequence[float],
                   include_argmax: bool = False) -> list[tuple[float, float, float]]:
    """(kappa, empirical coverage, average set size) for each kappa."""
    P = np.asarray(test_probs, dtype=np.float64)
    labels = np.asarray(test_labels, dtype=np.int64)
    if P.ndim != 2 or labels.shape != (P.shape[0],):
        raise ConformalError("test_probs must be n x C with one label per row")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-8) or np.any(P < 0):
        raise ConformalError("each row of test_probs must be a probability vector")
    rows = []
    for kappa in kappas:
        calib = calibrate(cal_true_probs, kappa, include_argmax)
        inside = _batch_sets(P, calib)
        covered = inside[np.arange(P.shape[0]), labels]
        rows.append((float(kappa), float(covered.mean()), float(inside.sum(axis=1).mean())))
    return rows
