"""BPR, InfoNCE and the layer-to-layer contrast family, with exact gradients.

Every loss returns a :class:`LossOutput` whose gradient is keyed by the
matrix it addresses: an integer layer index into the :class:`LayerStack`, or
``"readout"`` for the mean-readout embeddings. :func:`l2cl.optim.backward`
turns those into a gradient on the layer-0 table.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import InteractionSet, TrainBatch
from .model import LayerStack
from .optim import READOUT, GradAccumulator

COSINE_EPS = 1e-12

# a "view" of the stack: weighted sum of layers, as ((layer, coef), ...)
View = Sequence[tuple[int, float]]


class ContrastScheme(enum.Enum):
    U0_I0 = "U0_I0"
    U1_I1 = "U1_I1"
    U0_I1 = "U0_I1"
    U0_U2 = "U0_U2"
    U0_SumU123 = "U0_SumU123"

    @property
    def required_depth(self) -> int:
        return _DEPTH[self]

    @classmethod
    def parse(cls, name: str) -> "ContrastScheme":
        for s in cls:
            if s.value.lower() == name.strip().lower():
                return s
        raise ValueError(f"unknown contrast scheme {name!r}; choose from {[s.value for s in cls]}")


_DEPTH = {
    ContrastScheme.U0_I0: 0,
    ContrastScheme.U1_I1: 1,
    ContrastScheme.U0_I1: 1,
    ContrastScheme.U0_U2: 2,
    ContrastScheme.U0_SumU123: 3,
}


@dataclass(frozen=True)
class CLHyper:
    tau: float = 0.1
    alpha: float = 0.5
    lambda1: float = 0.0
    lambda2: float = 1e-4

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")


@dataclass
class LossOutput:
    value: float
    grad: GradAccumulator
    parts: dict[str, float] = field(default_factory=dict)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1]; a zero vector has similarity 0 with anything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= COSINE_EPS or nb <= COSINE_EPS:
        return 0.0
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))


@dataclass
class InfoNCEResult:
    value: float
    grad_anchors: np.ndarray
    grad_candidates: np.ndarray


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(np.einsum("nd,nd->n", x, x))
    unit = np.divide(x, norm[:, None], out=np.zeros_like(x), where=norm[:, None] > COSINE_EPS)
    return unit, norm


def _unit_backward(grad_unit: np.ndarray, unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    radial = np.einsum("nd,nd->n", grad_unit, unit)[:, None]
    return np.divide(grad_unit - radial * unit, norm[:, None], out=np.zeros_like(unit),
                     where=norm[:, None] > COSINE_EPS)


def infonce_pairs(anchors: np.ndarray, candidates: np.ndarray, anchor_index: np.ndarray,
                  pos_index: np.ndarray, tau: float, need_grad: bool = True) -> InfoNCEResult:
    """Summed InfoNCE over (anchor, positive) pairs given as indices into
    ``anchors`` and ``candidates``; every pair's denominator is the full
    candidate set, positive included.

    Anchors that occur in several pairs share one softmax row, so the cost is
    set by the number of distinct anchors rather than the number of pairs.
    With ``need_grad=False`` the gradient fields are None.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    a = np.asarray(anchors, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    anchor_index = np.asarray(anchor_index, dtype=np.int64)
    pos_index = np.asarray(pos_index, dtype=np.int64)
    if anchor_index.size == 0:
        return InfoNCEResult(0.0, np.zeros_like(a), np.zeros_like(c))
    ua, na = _unit(a)
    uc, nc = _unit(c)
    logits = ua @ uc.T
    np.clip(logits, -1.0, 1.0, out=logits)
    logits /= tau
    pos_logit = logits[anchor_index, pos_index]
    count = np.bincount(anchor_index, minlength=a.shape[0]).astype(np.float64)

    # softmax in place, keeping the log-partition per anchor
    shift = logits.max(axis=1, keepdims=True)
    logits -= shift
    np.exp(logits, out=logits)
    partition = logits.sum(axis=1, keepdims=True)
    lse = np.log(partition[:, 0]) + shift[:, 0]
    value = float(np.sum(count * lse) - np.sum(pos_logit))
    if not need_grad:
        return InfoNCEResult(value, None, None)

    logits *= (count / tau)[:, None] / partition
    np.subtract.at(logits, (anchor_index, pos_index), 1.0 / tau)
    g_ua = logits @ uc
    g_uc = logits.T @ ua
    return InfoNCEResult(value, _unit_backward(g_ua, ua, na), _unit_backward(g_uc, uc, nc))


def infonce(anchors: np.ndarray, candidates: np.ndarray, pos_index: np.ndarray, tau: float) -> InfoNCEResult:
    """Summed InfoNCE with cosine similarity; anchor k's positive is ``candidates[pos_index[k]]``."""
    anchors = np.asarray(anchors)
    return infonce_pairs(anchors, candidates, np.arange(anchors.shape[0]), pos_index, tau)


def _gather(stack: LayerStack, view: View, rows: np.ndarray) -> np.ndarray:
    out = None
    for layer, coef in view:
        part = stack.layers[layer][rows].astype(np.float64)
        if coef != 1.0:
            part = coef * part
        out = part if out is None else out + part
    return out


def _scatter(grad: GradAccumulator, view: View, rows: np.ndarray, values: np.ndarray, scale: float) -> None:
    for layer, coef in view:
        grad.add(layer, rows, values, scale * coef)


def contrast(stack: LayerStack, anchor_view: View, anchor_rows: np.ndarray, cand_view: View,
             positive_rows: np.ndarray, tau: float, scale: float = 1.0, need_grad: bool = True) -> LossOutput:
    """One InfoNCE term over global node rows.

    Anchor k is ``anchor_view[anchor_rows[k]]``, its positive is
    ``cand_view[positive_rows[k]]`` and the candidate pool is the unique set of
    ``positive_rows``.
    """
    anchor_rows = np.asarray(anchor_rows, dtype=np.int64)
    positive_rows = np.asarray(positive_rows, dtype=np.int64)
    cand_rows, pos_index = np.unique(positive_rows, return_inverse=True)
    uniq_anchor, anchor_index = np.unique(anchor_rows, return_inverse=True)
    res = infonce_pairs(_gather(stack, anchor_view, uniq_anchor), _gather(stack, cand_view, cand_rows),
                        anchor_index, pos_index, tau, need_grad)
    grad = GradAccumulator()
    if not need_grad:
        return LossOutput(scale * res.value, grad)
    _scatter(grad, anchor_view, uniq_anchor, res.grad_anchors, scale)
    _scatter(grad, cand_view, cand_rows, res.grad_candidates, scale)
    return LossOutput(scale * res.value, grad)


def _check_depth(stack: LayerStack, *layers: int) -> None:
    need = max(layers)
    if stack.depth < need:
        raise ValueError(f"contrast needs layer {need} but the stack only has depth {stack.depth}")


def _check_edges(pairs_users, pairs_items, train: InteractionSet | None) -> None:
    if train is not None and not train.contains(pairs_users, pairs_items).all():
        raise ValueError("contrast pair is not an observed training edge")


def cl_homogeneous(stack: LayerStack, m: int, n: int, nodes: np.ndarray, tau: float,
                   positive_view: View | None = None, scale: float = 1.0, need_grad: bool = True) -> LossOutput:
    """Same-node contrast between layer ``m`` (anchor) and layer ``n``.

    ``nodes`` are global row ids (users, or M + item for the item side).
    ``positive_view`` overrides the layer-``n`` view, e.g. a mean of layers.
    """
    view = positive_view if positive_view is not None else ((n, 1.0),)
    _check_depth(stack, m, *(layer for layer, _ in view))
    nodes = np.asarray(nodes, dtype=np.int64)
    return contrast(stack, ((m, 1.0),), nodes, view, nodes, tau, scale, need_grad)


def cl_heterogeneous(stack: LayerStack, m: int, n: int, users: np.ndarray, items: np.ndarray, tau: float,
                     train: InteractionSet | None = None, scale: float = 1.0, need_grad: bool = True) -> LossOutput:
    """Item anchor at layer ``m`` against its connected user at layer ``n``; in-batch user candidates."""
    _check_depth(stack, m, n)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_edges(users, items, train)
    return contrast(stack, ((m, 1.0),), items + stack.num_users, ((n, 1.0),), users, tau, scale, need_grad)


def _item_side_heterogeneous(stack: LayerStack, m: int, n: int, users, items, tau, scale,
                             need_grad=True) -> LossOutput:
    # user anchor at layer m against its connected item at layer n; in-batch item candidates
    return contrast(stack, ((m, 1.0),), users, ((n, 1.0),), items + stack.num_users, tau, scale, need_grad)


def _combine(first: LossOutput, second: LossOutput, parts: dict) -> LossOutput:
    grad = GradAccumulator().merge(first.grad).merge(second.grad)
    return LossOutput(first.value + second.value, grad, parts)


def one_hop_cl(stack: LayerStack, users: np.ndarray, items: np.ndarray, tau: float, alpha: float,
               train: InteractionSet | None = None, need_grad: bool = True) -> LossOutput:
    """alpha * (item@1 vs user@0) + (1 - alpha) * (user@1 vs item@0) over observed edges."""
    _check_depth(stack, 1)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_edges(users, items, train)
    user_side = cl_heterogeneous(stack, 1, 0, users, items, tau, scale=alpha, need_grad=need_grad)
    item_side = _item_side_heterogeneous(stack, 1, 0, users, items, tau, 1.0 - alpha, need_grad)
    return _combine(user_side, item_side, {"user_side": user_side.value, "item_side": item_side.value})


def _homogeneous_pair(stack, m, users, items, tau, alpha, view, need_grad=True) -> LossOutput:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    user_side = cl_homogeneous(stack, m, 0, users, tau, view, alpha, need_grad)
    item_side = cl_homogeneous(stack, m, 0, items + stack.num_users, tau, view, 1.0 - alpha, need_grad)
    return _combine(user_side, item_side, {"user_side": user_side.value, "item_side": item_side.value})


MEAN_123: View = ((1, 1.0 / 3.0), (2, 1.0 / 3.0), (3, 1.0 / 3.0))


def scheme_loss(scheme: ContrastScheme, stack: LayerStack, users: np.ndarray, items: np.ndarray,
                tau: float, alpha: float, train: InteractionSet | None = None,
                need_grad: bool = True) -> LossOutput:
    if stack.depth < scheme.required_depth:
        raise ValueError(f"scheme {scheme.value} needs depth {scheme.required_depth}, stack has {stack.depth}")
    if scheme is ContrastScheme.U0_I0:
        return cl_heterogeneous(stack, 0, 0, users, items, tau, train, need_grad=need_grad)
    if scheme is ContrastScheme.U1_I1:
        return cl_heterogeneous(stack, 1, 1, users, items, tau, train, need_grad=need_grad)
    if scheme is ContrastScheme.U0_I1:
        return one_hop_cl(stack, users, items, tau, alpha, train, need_grad)
    if scheme is ContrastScheme.U0_U2:
        return _homogeneous_pair(stack, 0, users, items, tau, alpha, ((2, 1.0),), need_grad)
    return _homogeneous_pair(stack, 0, users, items, tau, alpha, MEAN_123, need_grad)


def bpr_loss(readout: np.ndarray, batch: TrainBatch, num_users: int, key=READOUT,
             need_grad: bool = True) -> LossOutput:
    """Summed -log sigmoid(pos - neg) over the batch triples."""
    u_rows = batch.users
    p_rows = batch.pos_items + num_users
    n_rows = batch.neg_items + num_users
    e_u = readout[u_rows].astype(np.float64)
    e_p = readout[p_rows].astype(np.float64)
    e_n = readout[n_rows].astype(np.float64)
    diff = np.einsum("bd,bd->b", e_u, e_p - e_n)
    value = float(np.sum(np.logaddexp(0.0, -diff)))
    grad = GradAccumulator()
    if not need_grad:
        return LossOutput(value, grad)
    s = expit(-diff)[:, None]
    grad.add(key, u_rows, -s * (e_p - e_n))
    grad.add(key, p_rows, -s * e_u)
    grad.add(key, n_rows, s * e_u)
    return LossOutput(value, grad)


def batch_rows(batch: TrainBatch, num_users: int) -> np.ndarray:
    """Unique layer-0 rows touched by a batch (users, positives, negatives)."""
    return np.unique(np.concatenate([batch.users, batch.pos_items + num_users, batch.neg_items + num_users]))


def l2_reg(table: np.ndarray, rows: np.ndarray, need_grad: bool = True) -> LossOutput:
    sub = table[rows].astype(np.float64)
    grad = GradAccumulator()
    if need_grad:
        grad.add(0, rows, 2.0 * sub)
    return LossOutput(float(np.sum(sub * sub)), grad)


def total_loss(stack: LayerStack, batch: TrainBatch, scheme: ContrastScheme | None, hyper: CLHyper,
               readout_mode: str = "mean", train: InteractionSet | None = None,
               need_grad: bool = True) -> LossOutput:
    """BPR + lambda1 * contrast + lambda2 * batch-scoped L2 on the layer-0 rows.

    ``parts`` holds the unweighted components: ``bpr``, ``cl`` and ``reg``.
    ``need_grad=False`` skips the backward pieces (the gradient comes back empty).
    """
    m = stack.num_users
    if readout_mode == "mean":
        rec = bpr_loss(stack.readout, batch, m, READOUT, need_grad)
    elif readout_mode == "layer0":
        rec = bpr_loss(stack.layers[0], batch, m, 0, need_grad)
    else:
        raise ValueError(f"unknown readout mode {readout_mode!r}")
    grad = GradAccumulator().merge(rec.grad)
    cl_value = 0.0
    if scheme is not None and hyper.lambda1 > 0:
        cl = scheme_loss(scheme, stack, batch.users, batch.pos_items, hyper.tau, hyper.alpha, train, need_grad)
        cl_value = cl.value
        grad.merge(cl.grad, hyper.lambda1)
    reg_value = 0.0
    if hyper.lambda2 > 0:
        reg = l2_reg(stack.layers[0], batch_rows(batch, m), need_grad)
        reg_value = reg.value
        grad.merge(reg.grad, hyper.lambda2)
    value = rec.value + hyper.lambda1 * cl_value + hyper.lambda2 * reg_value
    return LossOutput(value, grad, {"bpr": rec.value, "cl": cl_value, "reg": reg_value})
