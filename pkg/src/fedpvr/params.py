"""Flat parameter vectors, layer layouts and variance-reduction masks.

Parameters, gradients and control variates are plain 1-D ``float64`` numpy
arrays. A :class:`LayerLayout` names contiguous slices of that array and a
:class:`Mask` selects the coordinates that receive variance reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when two vectors (or a vector and a layout) disagree in size."""


@dataclass(frozen=True)
class Layer:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


@dataclass(frozen=True)
class LayerLayout:
    """Ordered, contiguous partition of ``[0, d)`` into named layers."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("layout needs at least one layer")
        expected = 0
        seen = set()
        for layer in self.layers:
            if layer.length <= 0:
                raise ValueError(f"layer {layer.name!r} has non-positive length {layer.length}")
            if layer.offset != expected:
                raise ValueError(
                    f"layer {layer.name!r} starts at {layer.offset}, expected {expected}"
                )
            if layer.name in seen:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)
            expected = layer.stop

    @classmethod
    def from_lengths(cls, lengths: Sequence[int], names: Sequence[str] | None = None) -> "LayerLayout":
        if names is None:
            names = [f"layer{k}" for k in range(len(lengths))]
        if len(names) != len(lengths):
            raise ValueError("names and lengths differ in count")
        layers = []
        offset = 0
        for name, length in zip(names, lengths):
            layers.append(Layer(str(name), offset, int(length)))
            offset += int(length)
        return cls(tuple(layers))

    @property
    def total_dim(self) -> int:
        return self.layers[-1].stop

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    def index(self, layer: int | str) -> int:
        if isinstance(layer, str):
            try:
                return self.names.index(layer)
            except ValueError:
                raise KeyError(f"unknown layer {layer!r}") from None
        if not 0 <= layer < len(self.layers):
            raise IndexError(f"layer index {layer} out of range [0, {len(self.layers)})")
        return int(layer)

    def __getitem__(self, layer: int | str) -> Layer:
        return self.layers[self.index(layer)]


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary selector ``p``; ones mark the variance-reduced block S_svr."""

    bits: np.ndarray
    svr_idx: np.ndarray = field(init=False, repr=False)
    sgd_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise ValueError("mask must be one-dimensional")
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask entries must be 0 or 1")
        bits = bits.astype(np.int8)
        bits.setflags(write=False)
        svr = np.flatnonzero(bits)
        sgd = np.flatnonzero(bits == 0)
        svr.setflags(write=False)
        sgd.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "svr_idx", svr)
        object.__setattr__(self, "sgd_idx", sgd)

    @classmethod
    def zeros(cls, d: int) -> "Mask":
        return cls(np.zeros(d, dtype=np.int8))

    @classmethod
    def ones(cls, d: int) -> "Mask":
        return cls(np.ones(d, dtype=np.int8))

    @property
    def dim(self) -> int:
        return self.bits.shape[0]

    @property
    def v(self) -> int:
        return int(self.svr_idx.shape[0])

    def complement(self) -> "Mask":
        return Mask(1 - self.bits)

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())


def mask_from_layer_cutoff(layout: LayerLayout, first_svr_layer: int) -> Mask:
    """Variance-reduce every layer with index ``>= first_svr_layer``.

    ``first_svr_layer == 0`` masks the whole model (SCAFFOLD) and
    ``first_svr_layer == len(layout)`` masks nothing (FedAvg).
    """
    n_layers = len(layout)
    if not 0 <= first_svr_layer <= n_layers:
        raise IndexError(f"cutoff {first_svr_layer} outside [0, {n_layers}]")
    bits = np.zeros(layout.total_dim, dtype=np.int8)
    if first_svr_layer < n_layers:
        bits[layout.layers[first_svr_layer].offset:] = 1
    return Mask(bits)


def mask_from_layers(layout: LayerLayout, layers: Iterable[int | str]) -> Mask:
    bits = np.zeros(layout.total_dim, dtype=np.int8)
    for layer in layers:
        bits[layout[layer].slice] = 1
    return Mask(bits)


def as_vector(x, dim: int | None = None) -> np.ndarray:
    """Coerce to a 1-D float64 array, checking the dimension if given."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {arr.shape[0]}")
    return arr


def _check_same(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"dimension mismatch: {x.shape} vs {y.shape}")


def masked(v, m: Mask) -> np.ndarray:
    """Return ``p * v``: entries outside S_svr are set to zero."""
    v = as_vector(v)
    if v.shape[0] != m.dim:
        raise DimensionError(f"vector has dimension {v.shape[0]}, mask {m.dim}")
    out = np.zeros_like(v)
    out[m.svr_idx] = v[m.svr_idx]
    return out


def axpy(a: float, x, y) -> np.ndarray:
    x, y = as_vector(x), as_vector(y)
    _check_same(x, y)
    return a * x + y


def dot(x, y) -> float:
    x, y = as_vector(x), as_vector(y)
    _check_same(x, y)
    return float(np.dot(x, y))


def norm_sq(x) -> float:
    x = as_vector(x)
    return float(np.dot(x, x))


def layer_slice(x, layout: LayerLayout, layer: int | str) -> np.ndarray:
    x = as_vector(x, layout.total_dim)
    return x[layout[layer].slice]


def pairwise_sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Sum vectors in a fixed binary-tree order (ascending index at each level).

    The order depends only on ``len(vectors)``, so results are reproducible
    regardless of how the inputs were produced.
    """
    if not vectors:
        raise ValueError("nothing to sum")
    level = [as_vector(v) for v in vectors]
    for v in level[1:]:
        _check_same(level[0], v)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0].copy()


def all_finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))
