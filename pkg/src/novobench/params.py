"""Flat parameter layers with paired gradient buffers.

A model is an ordered list of named flat vectors ("layers"); the layer is
the unit of all layer-wise computations (gradient norms, second moments,
trust ratios).  Norms are accumulated in a fixed left-to-right order so
that identical inputs give bit-identical results and power-of-two gradient
scaling is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ParameterLayer",
    "ModelParams",
    "StateReport",
    "l2_norm_sq",
    "l2_norm",
    "state_report",
    "zero_grads",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def l2_norm_sq(v) -> float:
    """Sum of squares of ``v`` with fixed left-to-right sequential summation.

    The sequential order is deliberate: it keeps the result bit-reproducible
    for a given element order, and scaling every element by a power of two
    scales the result exactly (each square and each partial sum scales
    exactly in binary floating point).
    """
    arr = np.asarray(v)
    if arr.size == 0:
        raise ValueError("empty layer")
    total = 0.0
    for x in arr.ravel().tolist():
        total += x * x
    return total


def l2_norm(v) -> float:
    """Euclidean norm, sqrt of :func:`l2_norm_sq`."""
    return math.sqrt(l2_norm_sq(v))


@dataclass
class ParameterLayer:
    """One named flat vector of trainable weights plus its gradient buffer.

    Arrays default to float64; passing float32 arrays selects the
    reduced-precision mode (all downstream arithmetic follows the array
    dtype, while norms still accumulate in 64-bit).
    """

    id: str
    weights: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights))
        if w.dtype not in _FLOAT_DTYPES:
            w = w.astype(np.float64)
        if w.ndim != 1:
            raise ValueError(f"layer '{self.id}': weights must be a flat vector")
        if w.size < 1:
            raise ValueError("empty layer")
        self.weights = w
        if self.grad is None:
            self.grad = np.zeros_like(w)
        else:
            g = np.atleast_1d(np.asarray(self.grad, dtype=w.dtype))
            if g.shape != w.shape:
                raise ValueError(
                    f"layer '{self.id}': grad length {g.size} != weights length {w.size}"
                )
            self.grad = g

    @property
    def size(self) -> int:
        return self.weights.size

    def copy(self) -> "ParameterLayer":
        return ParameterLayer(self.id, self.weights.copy(), self.grad.copy())


@dataclass
class ModelParams:
    """Ordered collection of :class:`ParameterLayer` with unique ids.

    Layer order is fixed for the lifetime of a run; every consumer iterates
    layers in this order so runs are deterministic.
    """

    layers: list[ParameterLayer] = field(default_factory=list)

    def __post_init__(self):
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate layer ids: {dup}")

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def total_elements(self) -> int:
        return sum(layer.size for layer in self.layers)

    @property
    def layer_ids(self) -> list[str]:
        return [layer.id for layer in self.layers]

    def layer(self, layer_id: str) -> ParameterLayer:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(f"no layer '{layer_id}'")

    def copy(self) -> "ModelParams":
        return ModelParams([layer.copy() for layer in self.layers])


@dataclass(frozen=True)
class StateReport:
    """Optimizer state footprint: element counts by storage class."""

    algorithm: str
    per_layer_scalars: int
    full_vectors: int
    total_state_elements: int


# (full vectors of length N, scalars per layer) persisted by each algorithm
_STATE_SHAPES = {
    "sngd": (0, 0),
    "sgd": (1, 0),
    "adam": (2, 0),
    "adamw": (2, 0),
    "novograd": (1, 1),
}


def state_report(algorithm: str, params: ModelParams, *, ams: bool = False) -> StateReport:
    """Account for the persistent state an optimizer keeps for ``params``.

    NovoGrad stores one momentum vector plus one second-moment scalar per
    layer (two scalars with the running-max variant), roughly half of
    Adam's two full moment vectors.
    """
    try:
        full_vectors, scalars = _STATE_SHAPES[algorithm]
    except KeyError:
        raise ValueError(f"unknown algorithm '{algorithm}'") from None
    if algorithm == "novograd" and ams:
        scalars = 2
    n = params.total_elements
    num_layers = len(params.layers)
    total = full_vectors * n + scalars * num_layers
    return StateReport(algorithm, scalars, full_vectors, total)


def zero_grads(params: ModelParams) -> None:
    """Zero every gradient buffer in place; weights are untouched."""
    for layer in params.layers:
        layer.grad[...] = 0.0
