"""Bipartite interaction graph and the symmetric-normalised propagation operator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import InteractionSet

_OP_MAGIC = b"L2OP"
_OP_VERSION = 1


@dataclass(frozen=True)
class InteractionGraph:
    """CSR adjacency over M + N nodes, users first then items."""

    num_users: int
    num_items: int
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]


@dataclass(frozen=True)
class PropagationOperator:
    num_users: int
    num_items: int
    matrix: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    def weight(self, a: int, b: int) -> float:
        return float(self.matrix[a, b])

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_graph(train: InteractionSet) -> InteractionGraph:
    m, n = train.num_users, train.num_items
    if len(train) == 0:
        raise ValueError("cannot build a graph from an empty training set")
    rows = np.concatenate([train.users, train.items + m])
    cols = np.concatenate([train.items + m, train.users])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.searchsorted(rows, np.arange(m + n + 1)).astype(np.int64)
    return InteractionGraph(m, n, indptr, cols.astype(np.int64))


def normalize(graph: InteractionGraph) -> PropagationOperator:
    deg = graph.degrees.astype(np.float64)
    rows = np.repeat(np.arange(graph.num_nodes), graph.degrees)
    cols = graph.indices
    # deg > 0 for every endpoint of an edge, so no division by zero here
    weights = 1.0 / np.sqrt(deg[rows] * deg[cols])
    mat = sp.csr_matrix((weights, cols, graph.indptr.copy()), shape=(graph.num_nodes, graph.num_nodes))
    return PropagationOperator(graph.num_users, graph.num_items, mat)


def build_operator(train: InteractionSet) -> PropagationOperator:
    return normalize(build_graph(train))


def propagate(op: PropagationOperator, emb: np.ndarray) -> np.ndarray:
    """One multiplication by the normalised adjacency."""
    if emb.ndim != 2 or emb.shape[0] != op.num_nodes:
        raise ValueError(f"embedding has shape {emb.shape}, expected ({op.num_nodes}, d)")
    if emb.dtype == np.float64:
        return op.matrix @ emb
    # float32 storage still accumulates in float64
    return (op.matrix @ emb.astype(np.float64)).astype(emb.dtype)


def save_operator(op: PropagationOperator, path: str | Path) -> None:
    mat = op.matrix
    with open(path, "wb") as fh:
        fh.write(_OP_MAGIC)
        fh.write(struct.pack("<IQQQ", _OP_VERSION, op.num_users, op.num_items, mat.nnz))
        fh.write(mat.indptr.astype("<i8").tobytes())
        fh.write(mat.indices.astype("<i8").tobytes())
        fh.write(mat.data.astype("<f8").tobytes())


def load_operator(path: str | Path) -> PropagationOperator:
    raw = Path(path).read_bytes()
    if raw[:4] != _OP_MAGIC:
        raise ValueError(f"{path}: not a propagation-operator cache")
    version, m, n, nnz = struct.unpack_from("<IQQQ", raw, 4)
    if version != _OP_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    off = 4 + struct.calcsize("<IQQQ")
    indptr = np.frombuffer(raw, "<i8", m + n + 1, off)
    off += indptr.nbytes
    indices = np.frombuffer(raw, "<i8", nnz, off)
    off += indices.nbytes
    data = np.frombuffer(raw, "<f8", nnz, off)
    mat = sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(m + n, m + n))
    return PropagationOperator(m, n, mat)
