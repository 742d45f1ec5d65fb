"""Round diagnostics: drift diversity, client drift, CKA and speedup tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .params import LayerLayout, Mask, as_vector

# Drift diversity with a vanishing aggregate update.
XI_INFINITE = math.inf
# All client updates are zero, so the ratio is 0/0.
DEGENERATE = "degenerate"
# Target never reached within the run (the "100+" entries of a speedup table).
NOT_REACHED = None

_CANCELLATION_RATIO = 1e-24


def _xi(deltas: list[np.ndarray]) -> float | str:
    energy = float(sum(np.dot(m, m) for m in deltas))
    if energy == 0.0:
        return DEGENERATE
    total = deltas[0].copy()
    for m in deltas[1:]:
        total += m
    agg = float(np.dot(total, total))
    if agg < _CANCELLATION_RATIO * energy:
        return XI_INFINITE
    return energy / agg


@dataclass
class DiversityReport:
    round: int
    xi_global: float | str
    xi_per_layer: dict[str, float | str] = field(default_factory=dict)


def drift_diversity(deltas: Sequence, layout: LayerLayout | None = None,
                    mask: Mask | None = None, round_index: int = 0) -> DiversityReport:
    """``sum ||m_i||^2 / ||sum m_i||^2`` over all coordinates and per layer.

    ``deltas`` are the client updates ``m_i = y_{i,K} - x``. With ``mask`` the
    global value is restricted to the masked coordinates.
    """
    deltas = [as_vector(m) for m in deltas]
    if not deltas:
        raise ValueError("need at least one client update")
    d = deltas[0].shape[0]
    if any(m.shape[0] != d for m in deltas):
        raise ValueError("client updates differ in dimension")
    restricted = deltas if mask is None else [m[mask.svr_idx] for m in deltas]
    per_layer = {}
    if layout is not None:
        if layout.total_dim != d:
            raise ValueError("layout does not match the update dimension")
        for layer in layout.layers:
            per_layer[layer.name] = _xi([m[layer.slice] for m in deltas])
    return DiversityReport(round_index, _xi(restricted), per_layer)


def client_drift(trajectories: Sequence[Sequence], x_prev) -> float:
    """Mean squared distance of every local iterate ``y_{i,k}`` (k >= 1) from ``x_prev``."""
    x_prev = as_vector(x_prev)
    total = 0.0
    count = 0
    for steps in trajectories:
        if len(steps) == 0:
            raise ValueError("each client needs at least one local step")
        for y in steps:
            diff = as_vector(y, x_prev.shape[0]) - x_prev
            total += float(np.dot(diff, diff))
            count += 1
    if count == 0:
        raise ValueError("no trajectories given")
    return total / count


def cka_linear(features_a, features_b) -> float:
    """Linear centred kernel alignment between two representations of the same inputs."""
    A = np.asarray(features_a, dtype=np.float64)
    B = np.asarray(features_b, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError("features must be 2-D with the same number of rows")
    if A.shape[0] < 2:
        raise ValueError("need at least two examples")
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    norm_a = np.linalg.norm(A.T @ A)
    norm_b = np.linalg.norm(B.T @ B)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("zero-variance features")
    cross = np.linalg.norm(B.T @ A) ** 2
    return float(min(1.0, max(0.0, cross / (norm_a * norm_b))))


@dataclass
class CkaReport:
    layers: list[str]
    matrices: dict[str, np.ndarray]


def client_cka(arch, client_params: Sequence, probe_inputs) -> CkaReport:
    """Pairwise client CKA per layer of an MLP, computed on a shared probe set."""
    acts = [arch.activations(p, probe_inputs) for p in client_params]
    names = arch.layout.names
    n = len(client_params)
    matrices = {}
    for k, name in enumerate(names):
        mat = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                try:
                    value = cka_linear(acts[i][k], acts[j][k])
                except ValueError:
                    # a dead layer (all-zero ReLU output) has no defined similarity
                    value = math.nan
                mat[i, j] = mat[j, i] = value
        matrices[name] = mat
    return CkaReport(names, matrices)


def rounds_to_target(values: Sequence[float], target: float, higher_is_better: bool = True):
    """First 1-based round whose value meets ``target``, else :data:`NOT_REACHED`."""
    if len(values) == 0:
        raise ValueError("no rounds recorded")
    for r, value in enumerate(values, start=1):
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        if (value >= target) if higher_is_better else (value <= target):
            return r
    return NOT_REACHED


def speedup(baseline_rounds, method_rounds) -> float | None:
    """``baseline / method``; ``None`` when the method never reached the target.

    An unreached baseline is not a number either, so that also yields ``None``;
    callers can report a lower bound from the run length instead.
    """
    if method_rounds is NOT_REACHED or baseline_rounds is NOT_REACHED:
        return None
    return baseline_rounds / method_rounds


def format_rounds(rounds, total_rounds: int, speed: float | None = None) -> str:
    """Render like ``27(2.0x)`` or ``80+(-)``."""
    head = f"{total_rounds}+" if rounds is NOT_REACHED else str(rounds)
    tail = "-" if speed is None else f"{speed:.1f}x"
    return f"{head}({tail})"


def control_variate_error(client_variates: Sequence, grads_at_opt: Sequence) -> float:
    """Mean squared distance of each ``c_i`` from ``grad f_i(x*)``; quadratic diagnostics only."""
    if len(client_variates) != len(grads_at_opt) or not client_variates:
        raise ValueError("need one optimum gradient per client variate")
    return float(np.mean([np.sum((as_vector(c) - as_vector(g)) ** 2)
                          for c, g in zip(client_variates, grads_at_opt)]))
