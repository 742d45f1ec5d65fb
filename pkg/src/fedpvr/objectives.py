"""Local client objectives with exact and minibatch gradient oracles.

Every objective exposes ``dim``, ``layout``, ``loss(x)``, ``full_gradient(x)``
and ``stochastic_gradient(x, batch_size, rng)``. Quadratics additionally
carry the analytic tooling used by the convergence checks: the ensemble
optimum, smoothness constants and the heterogeneity measures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .params import LayerLayout, Mask, as_vector, masked, norm_sq


@dataclass
class GradientSample:
    gradient: np.ndarray
    batch_ids: np.ndarray
    loss: float


class UnsupportedObjective(TypeError):
    pass


def _sample_batch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        raise ValueError("cannot sample from an empty shard")
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    if batch_size == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


class QuadraticObjective:
    """``f(x) = 0.5 x'Ax - b'x + const`` with optional Gaussian gradient noise.

    ``A`` may be given as a full symmetric matrix or as a 1-D diagonal.
    ``noise_std`` adds i.i.d. ``N(0, noise_std^2)`` noise per coordinate to
    stochastic gradients, giving ``sigma^2 = d * noise_std^2``. ``batch_size``
    is accepted for interface compatibility and otherwise ignored.
    """

    def __init__(self, A, b, const: float = 0.0, noise_std: float = 0.0,
                 layout: LayerLayout | None = None):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim == 1:
            A = np.diag(A)
        b = as_vector(b)
        if A.shape != (b.shape[0], b.shape[0]):
            raise ValueError(f"A has shape {A.shape} but b has length {b.shape[0]}")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(A).min() < -1e-10 * max(1.0, np.abs(A).max()):
            raise ValueError("A must be positive semidefinite")
        if noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        self.A = A
        self.b = b
        self.const = float(const)
        self.noise_std = float(noise_std)
        self.layout = layout or LayerLayout.from_lengths([b.shape[0]], ["x"])
        if self.layout.total_dim != b.shape[0]:
            raise ValueError("layout does not match the dimension of b")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def loss(self, x) -> float:
        x = as_vector(x, self.dim)
        return float(0.5 * x @ self.A @ x - self.b @ x + self.const)

    def full_gradient(self, x) -> np.ndarray:
        x = as_vector(x, self.dim)
        return self.A @ x - self.b

    def stochastic_gradient(self, x, batch_size: int, rng: np.random.Generator) -> GradientSample:
        g = self.full_gradient(x)
        if self.noise_std > 0:
            g = g + self.noise_std * rng.standard_normal(self.dim)
        return GradientSample(g, np.empty(0, dtype=np.int64), self.loss(x))


class LogisticObjective:
    """Binary logistic regression with labels in {-1, +1} and a ridge term.

    ``f(w) = mean(log(1 + exp(-y * Xw))) + 0.5 * ridge * ||w||^2``.
    """

    def __init__(self, features, labels, ridge: float = 0.0):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("features must be n x m and labels length n")
        if ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        if not np.all(np.abs(y) == 1):
            raise ValueError("labels must be +1 or -1")
        self.X = X
        self.y = y
        self.ridge = float(ridge)
        self.layout = LayerLayout.from_lengths([X.shape[1]], ["w"])

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def _loss_grad(self, w: np.ndarray, ids: np.ndarray | None) -> tuple[float, np.ndarray]:
        X = self.X if ids is None else self.X[ids]
        y = self.y if ids is None else self.y[ids]
        margin = y * (X @ w)
        loss = np.mean(np.logaddexp(0.0, -margin)) + 0.5 * self.ridge * (w @ w)
        # d/dm log(1+exp(-m)) = -sigmoid(-m), written to avoid overflow
        weight = -y * np.exp(-np.logaddexp(0.0, margin))
        grad = X.T @ weight / X.shape[0] + self.ridge * w
        return float(loss), grad

    def loss(self, w) -> float:
        return self._loss_grad(as_vector(w, self.dim), None)[0]

    def full_gradient(self, w) -> np.ndarray:
        return self._loss_grad(as_vector(w, self.dim), None)[1]

    def stochastic_gradient(self, w, batch_size: int, rng: np.random.Generator) -> GradientSample:
        ids = _sample_batch(self.n, batch_size, rng)
        loss, grad = self._loss_grad(as_vector(w, self.dim), ids)
        return GradientSample(grad, ids, loss)


@dataclass(frozen=True)
class MlpArchitecture:
    """Fully connected ReLU network ending in a softmax classifier.

    Each dense layer is one entry of the layout: its weight matrix
    (``fan_in x fan_out``, row-major) followed by its bias.
    """

    input_dim: int
    hidden: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.n_classes < 2 or any(h < 1 for h in self.hidden):
            raise ValueError("invalid MLP architecture")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.n_classes]

    @property
    def layout(self) -> LayerLayout:
        w = self.widths
        lengths = [w[k] * w[k + 1] + w[k + 1] for k in range(len(w) - 1)]
        names = [f"dense{k}" for k in range(len(w) - 2)] + ["classifier"]
        return LayerLayout.from_lengths(lengths, names)

    @property
    def dim(self) -> int:
        return self.layout.total_dim

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        params = as_vector(params, self.dim)
        w = self.widths
        out = []
        offset = 0
        for k in range(len(w) - 1):
            n_w = w[k] * w[k + 1]
            W = params[offset:offset + n_w].reshape(w[k], w[k + 1])
            offset += n_w
            bias = params[offset:offset + w[k + 1]]
            offset += w[k + 1]
            out.append((W, bias))
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        w = self.widths
        for k in range(len(w) - 1):
            W = rng.standard_normal((w[k], w[k + 1])) * np.sqrt(2.0 / w[k])
            parts.extend([W.ravel(), np.zeros(w[k + 1])])
        return np.concatenate(parts)

    def activations(self, params, inputs) -> list[np.ndarray]:
        """Outputs of every dense layer (post-ReLU for hidden, logits last)."""
        h = np.asarray(inputs, dtype=np.float64)
        outs = []
        layers = self.unpack(params)
        for k, (W, bias) in enumerate(layers):
            z = h @ W + bias
            h = z if k == len(layers) - 1 else np.maximum(z, 0.0)
            outs.append(h)
        return outs

    def logits(self, params, inputs) -> np.ndarray:
        return self.activations(params, inputs)[-1]

    def predict_proba(self, params, inputs) -> np.ndarray:
        z = self.logits(params, inputs)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss_and_grad(self, params, inputs, labels) -> tuple[float, np.ndarray]:
        X = np.asarray(inputs, dtype=np.float64)
        labels = np.asarray(labels)
        n = X.shape[0]
        layers = self.unpack(params)
        hs = [X]
        for k, (W, bias) in enumerate(layers):
            z = hs[-1] @ W + bias
            hs.append(z if k == len(layers) - 1 else np.maximum(z, 0.0))
        logits = hs[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(log_norm - shifted[np.arange(n), labels]))

        delta = np.exp(shifted - log_norm[:, None])
        delta[np.arange(n), labels] -= 1.0
        delta /= n
        grads = []
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            grads.append((hs[k].T @ delta, delta.sum(axis=0)))
            if k:
                delta = (delta @ W.T) * (hs[k] > 0)
        flat = []
        for gW, gb in reversed(grads):
            flat.extend([gW.ravel(), gb])
        return loss, np.concatenate(flat)


class MlpObjective:
    """Mean softmax cross-entropy of an :class:`MlpArchitecture` on a data shard."""

    def __init__(self, arch: MlpArchitecture, features, labels):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != arch.input_dim or y.shape != (X.shape[0],):
            raise ValueError("shard does not match the architecture")
        if y.size and (y.min() < 0 or y.max() >= arch.n_classes):
            raise ValueError("labels out of range")
        self.arch = arch
        self.X = X
        self.y = y
        self.layout = arch.layout

    @property
    def dim(self) -> int:
        return self.arch.dim

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def loss(self, params) -> float:
        return self.arch.loss_and_grad(params, self.X, self.y)[0]

    def full_gradient(self, params) -> np.ndarray:
        return self.arch.loss_and_grad(params, self.X, self.y)[1]

    def stochastic_gradient(self, params, batch_size: int, rng: np.random.Generator) -> GradientSample:
        ids = _sample_batch(self.n, batch_size, rng)
        loss, grad = self.arch.loss_and_grad(params, self.X[ids], self.y[ids])
        return GradientSample(grad, ids, loss)


def _check_quadratics(ensemble: Sequence) -> list[QuadraticObjective]:
    if not ensemble:
        raise ValueError("empty ensemble")
    for obj in ensemble:
        if not isinstance(obj, QuadraticObjective):
            raise UnsupportedObjective("the optimum is only available in closed form for quadratics")
    return list(ensemble)


def optimum(ensemble: Sequence[QuadraticObjective]) -> np.ndarray:
    """Minimiser of the average objective, ``(sum A_i)^-1 sum b_i``."""
    ensemble = _check_quadratics(ensemble)
    A = sum(obj.A for obj in ensemble)
    b = sum(obj.b for obj in ensemble)
    rank = np.linalg.matrix_rank(A)
    if rank < A.shape[0]:
        raise np.linalg.LinAlgError(
            f"sum of Hessians is singular: rank {rank} < dimension {A.shape[0]} "
            f"(deficiency {A.shape[0] - rank})"
        )
    return np.linalg.solve(A, b)


def power_iteration(A: np.ndarray, tol: float = 1e-10, max_iter: int = 200_000,
                    seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix."""
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] == 0:
        return 0.0
    v = np.random.default_rng(seed).standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        new_lam = float(v @ w)
        v = w / norm
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            # Rayleigh quotient at the converged vector
            return float(v @ A @ v)
        lam = new_lam
    return float(v @ A @ v)


def smoothness_constants(obj) -> tuple[float, float]:
    """Return ``(beta, mu)`` for quadratics (exact) and logistic objectives (bounds)."""
    if isinstance(obj, QuadraticObjective):
        beta = power_iteration(obj.A)
        mu = beta - power_iteration(beta * np.eye(obj.dim) - obj.A)
        return beta, max(0.0, min(mu, beta))
    if isinstance(obj, LogisticObjective):
        spectral = np.linalg.norm(obj.X, 2)
        return 0.25 * spectral**2 / obj.n + obj.ridge, obj.ridge
    raise UnsupportedObjective(f"no global constants available for {type(obj).__name__}")


def masked_smoothness(obj: QuadraticObjective, mask: Mask) -> float:
    """Largest eigenvalue of the Hessian restricted to the masked block."""
    if not isinstance(obj, QuadraticObjective):
        raise UnsupportedObjective("masked smoothness is only defined for quadratics")
    idx = mask.svr_idx
    return power_iteration(obj.A[np.ix_(idx, idx)])


def _mean_sq_grad(ensemble, x, keep: Mask | None) -> float:
    total = 0.0
    for obj in ensemble:
        g = obj.full_gradient(x)
        if keep is not None:
            g = masked(g, keep)
        total += norm_sq(g)
    return total / len(ensemble)


def heterogeneity_zeta(ensemble: Sequence, x_star, mask: Mask) -> tuple[float, float]:
    """Gradient dissimilarity at ``x_star``: over all coordinates and over S_sgd only."""
    if not ensemble:
        raise ValueError("empty ensemble")
    x_star = as_vector(x_star, mask.dim)
    return _mean_sq_grad(ensemble, x_star, None), _mean_sq_grad(ensemble, x_star, mask.complement())


def zeta_hat_estimate(ensemble: Sequence, mask: Mask, probe_points) -> float:
    """Lower bound on the uniform S_sgd heterogeneity: a max over probe points."""
    probe_points = list(probe_points)
    if not probe_points:
        raise ValueError("need at least one probe point")
    keep = mask.complement()
    return max(_mean_sq_grad(ensemble, as_vector(x, mask.dim), keep) for x in probe_points)
