"""Reference computations that do not share code paths with the package."""

import numpy as np


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        grad[j] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def max_relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def local_sgd_affine_map(A, b, lr, K):
    """Exact K-step gradient descent on 0.5 x'Ax - b'x as ``y = M x + v``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    d = b.size
    step = np.eye(d) - lr * A
    M = np.eye(d)
    v = np.zeros(d)
    for _ in range(K):
        M = step @ M
        v = step @ v + lr * b
    return M, v


def fedavg_fixed_point(hessians, linears, lr, K, global_lr=1.0):
    """Fixed point of the deterministic FedAvg round map x -> x + g (mean(M_i x + v_i) - x)."""
    maps = [local_sgd_affine_map(A, b, lr, K) for A, b in zip(hessians, linears)]
    M = np.mean([m for m, _ in maps], axis=0)
    v = np.mean([v for _, v in maps], axis=0)
    d = v.size
    # x = x + g (M x + v - x)  <=>  (I - M) x = v
    return np.linalg.solve(np.eye(d) - M, v)


def linear_fit_r2(t, y):
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return slope, 1.0 - np.sum(resid**2) / ss_tot
