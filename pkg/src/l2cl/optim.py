"""Reverse pass through the linear propagation stack, lazy Adam, and finite differences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable, Iterable

import numpy as np

from .graph import PropagationOperator, propagate

READOUT = "readout"


class GradAccumulator:
    """Row-sparse gradients keyed by matrix id (a layer index or ``"readout"``).

    Contributions are appended and only summed on demand, in insertion order,
    so merging accumulators from several workers is deterministic.
    """

    def __init__(self):
        self._parts: dict[Hashable, list[tuple[np.ndarray, np.ndarray]]] = {}

    def add(self, key: Hashable, rows, values, scale: float = 1.0) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        values = np.asarray(values)
        if rows.size == 0:
            return
        if scale != 1.0:
            values = values * scale
        self._parts.setdefault(key, []).append((rows, values))

    def merge(self, other: "GradAccumulator", scale: float = 1.0) -> "GradAccumulator":
        for key, parts in other._parts.items():
            for rows, values in parts:
                self.add(key, rows, values, scale)
        return self

    def keys(self) -> list:
        return list(self._parts)

    def dense(self, key: Hashable, shape: tuple[int, int], dtype=np.float64) -> np.ndarray:
        out = np.zeros(shape, dtype=dtype)
        for rows, values in self._parts.get(key, ()):
            np.add.at(out, rows, values)
        return out

    def rows(self, key: Hashable, num_rows: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
        """Summed gradient as (sorted unique rows, values)."""
        parts = self._parts.get(key)
        if not parts:
            return np.empty(0, dtype=np.int64), np.empty((0, dim))
        rows = np.concatenate([r for r, _ in parts])
        uniq, inv = np.unique(rows, return_inverse=True)
        out = np.zeros((uniq.size, dim))
        np.add.at(out, inv, np.concatenate([v for _, v in parts]))
        return uniq, out

    def max_layer(self) -> int:
        layers = [k for k in self._parts if k != READOUT]
        return max(layers) if layers else 0


def backward(op: PropagationOperator, n_layers: int, grads: GradAccumulator,
             dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Total derivative with respect to the layer-0 table.

    A gradient G at layer l reaches layer 0 as A^l G (A is symmetric); the
    readout gradient is split evenly over layers 0..L first. Evaluated Horner
    style so the cost is L propagations regardless of how many layers carry
    gradient. Returns (rows, values) for the rows with a nonzero gradient.
    """
    if grads.max_layer() > n_layers:
        raise ValueError(f"gradient addresses layer {grads.max_layer()} but the stack has depth {n_layers}")
    shape = (op.num_nodes, dim)
    readout = grads.dense(READOUT, shape) / (n_layers + 1) if READOUT in grads.keys() else None
    acc = None
    for layer in range(n_layers, -1, -1):
        if acc is not None:
            acc = propagate(op, acc)
        g = grads.dense(layer, shape) if layer in grads.keys() else None
        for extra in (g, readout):
            if extra is not None:
                acc = extra if acc is None else acc + extra
    if acc is None:
        return np.empty(0, dtype=np.int64), np.empty((0, dim))
    rows = np.flatnonzero(np.any(acc != 0.0, axis=1))
    return rows, acc[rows]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weight: np.ndarray, lr: float = 1e-3) -> "AdamState":
        return cls(np.zeros_like(weight), np.zeros_like(weight), 0, lr)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, weight: np.ndarray, rows: np.ndarray, grads: np.ndarray) -> None:
    """Lazy Adam: only rows that received a gradient have their moments touched.

    Mutates ``weight`` and ``state`` in place.
    """
    bad = ~np.isfinite(grads).all(axis=1)
    if bad.any():
        raise FloatingPointError(f"non-finite gradient in row {int(rows[np.argmax(bad)])}")
    state.t += 1
    if rows.size == 0:
        return
    g = grads.astype(weight.dtype, copy=False)
    m = state.beta1 * state.m[rows] + (1.0 - state.beta1) * g
    v = state.beta2 * state.v[rows] + (1.0 - state.beta2) * g * g
    state.m[rows] = m
    state.v[rows] = v
    m_hat = m / (1.0 - state.beta1 ** state.t)
    v_hat = v / (1.0 - state.beta2 ** state.t)
    weight[rows] -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(weight.dtype, copy=False)


def finite_diff_check(loss_fn: Callable[[np.ndarray], float], weight: np.ndarray, analytic: np.ndarray,
                      probes: Iterable[tuple[int, int]] | None = None, h: float = 1e-4,
                      order: int = 2) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    ``analytic`` is the dense gradient with the shape of ``weight``; ``probes``
    restricts the comparison to chosen (row, col) coordinates. ``order=2`` is
    the plain (f(x+h) - f(x-h)) / 2h stencil, ``order=4`` the five-point one,
    whose O(h^4) truncation matters once cosine terms see low-norm vectors.
    """
    if weight.dtype != np.float64:
        raise TypeError("finite-difference checks need a float64 table")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if probes is None:
        probes = np.ndindex(*weight.shape)
    worst = 0.0
    x = weight.copy()

    def at(r, c, offset):
        x[r, c] = orig + offset
        return loss_fn(x)

    for r, c in probes:
        orig = x[r, c]
        if order == 2:
            numeric = (at(r, c, h) - at(r, c, -h)) / (2.0 * h)
        else:
            near = at(r, c, h) - at(r, c, -h)
            far = at(r, c, 2 * h) - at(r, c, -2 * h)
            numeric = (8.0 * near - far) / (12.0 * h)
        x[r, c] = orig
        a = analytic[r, c]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
