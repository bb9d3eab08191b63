"""Embedding table, LightGCN forward pass, scoring and ranking."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .graph import PropagationOperator, propagate

_EMB_MAGIC = b"L2EM"
_EMB_VERSION = 1


@dataclass
class EmbeddingTable:
    num_users: int
    num_items: int
    weight: np.ndarray
    init_seed: int | None = None

    @property
    def dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.num_users, self.num_items, self.weight.copy(), self.init_seed)


@dataclass
class LayerStack:
    layers: list[np.ndarray]
    num_users: int = 0
    readout: np.ndarray = field(init=False)

    def __post_init__(self):
        total = self.layers[0].astype(np.float64, copy=True)
        for layer in self.layers[1:]:
            total += layer
        self.readout = (total / len(self.layers)).astype(self.layers[0].dtype, copy=False)

    @property
    def depth(self) -> int:
        return len(self.layers) - 1


def xavier_bound(d: int) -> float:
    return float(np.sqrt(6.0 / (d + d)))


def init_embeddings(num_users: int, num_items: int, d: int = 64, seed: int = 0,
                    dtype=np.float64) -> EmbeddingTable:
    """Xavier-uniform table with fan_in = fan_out = d."""
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    rng = np.random.default_rng(seed)
    bound = xavier_bound(d)
    weight = rng.uniform(-bound, bound, size=(num_users + num_items, d)).astype(dtype)
    return EmbeddingTable(num_users, num_items, weight, seed)


def forward(table: EmbeddingTable | np.ndarray, op: PropagationOperator, n_layers: int) -> LayerStack:
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    emb = table.weight if isinstance(table, EmbeddingTable) else table
    layers = [emb]
    for _ in range(n_layers):
        layers.append(propagate(op, layers[-1]))
    return LayerStack(layers, op.num_users)


def recommendation_embeddings(stack: LayerStack, mode: str = "mean") -> np.ndarray:
    """Embeddings used for scoring: the mean readout or the raw layer-0 table."""
    if mode == "mean":
        return stack.readout
    if mode == "layer0":
        return stack.layers[0]
    raise ValueError(f"unknown readout mode {mode!r}; expected 'mean' or 'layer0'")


def score(readout: np.ndarray, num_users: int, u: int, i: int) -> float:
    num_items = readout.shape[0] - num_users
    if not (0 <= u < num_users) or not (0 <= i < num_items):
        raise IndexError(f"(user={u}, item={i}) out of range for M={num_users}, N={num_items}")
    return float(readout[u] @ readout[num_users + i])


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices by descending score, ties to the lower index.

    ``-inf`` entries are masked and never returned; rows may come back short,
    in which case they are padded with -1.
    """
    scores = np.atleast_2d(scores)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(scores, order, axis=1)
    return np.where(np.isneginf(picked), -1, order)


def rank_items(readout: np.ndarray, num_users: int, u: int, exclude: Iterable[int] = (), k: int = 20) -> list[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= u < num_users:
        raise IndexError(f"user {u} out of range")
    scores = readout[num_users:] @ readout[u]
    scores = scores.astype(np.float64)
    excl = np.fromiter(exclude, dtype=np.int64)
    scores[excl] = -np.inf
    row = top_k(scores, k)[0]
    return row[row >= 0].tolist()


# -- export --------------------------------------------------------------------

def export_text(emb: np.ndarray, path: str | Path, nodes: np.ndarray | None = None) -> None:
    nodes = np.arange(emb.shape[0]) if nodes is None else nodes
    with open(path, "w") as fh:
        for node in nodes.tolist():
            fh.write(f"{node}\t" + ",".join(repr(float(x)) for x in emb[node]) + "\n")


def export_binary(emb: np.ndarray, num_users: int, path: str | Path) -> None:
    num_items = emb.shape[0] - num_users
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<IQQQ", _EMB_VERSION, num_users, num_items, emb.shape[1]))
        fh.write(np.ascontiguousarray(emb, dtype="<f4").tobytes())


def import_binary(path: str | Path) -> tuple[int, int, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding export")
    version, m, n, d = struct.unpack_from("<IQQQ", raw, 4)
    if version != _EMB_VERSION:
        raise ValueError(f"{path}: unsupported export version {version}")
    off = 4 + struct.calcsize("<IQQQ")
    emb = np.frombuffer(raw, "<f4", (m + n) * d, off).reshape(m + n, d).copy()
    return m, n, emb
