"""All-rank Recall@K / NDCG@K evaluation and user sparsity groups."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import InteractionSet, SplitDataset
from .model import top_k

DEFAULT_KS = (10, 20, 50)


def recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    hits = sum(1 for item in list(ranked)[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    dcg = sum(1.0 / math.log2(p + 2) for p, item in enumerate(list(ranked)[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(k, len(relevant))))
    return dcg / idcg


@dataclass
class EvalResult:
    recall: dict[int, float]
    ndcg: dict[int, float]
    num_users_evaluated: int
    per_user: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def records(self, phase: str) -> list[dict]:
        out = []
        for k in sorted(self.recall):
            out.append({"phase": phase, "metric": "recall", "k": k, "value": self.recall[k]})
            out.append({"phase": phase, "metric": "ndcg", "k": k, "value": self.ndcg[k]})
        return out


def _metric_rows(top: np.ndarray, truth: list[np.ndarray], ks: Sequence[int]) -> dict[str, np.ndarray]:
    """Per-user recall/ndcg for each k from a (users, max_k) top-index matrix."""
    max_k = top.shape[1]
    discount = 1.0 / np.log2(np.arange(2, max_k + 2))
    ideal = np.cumsum(discount)
    hits = np.zeros(top.shape, dtype=bool)
    n_rel = np.empty(len(truth))
    for row, items in enumerate(truth):
        hits[row] = np.isin(top[row], items)
        n_rel[row] = items.size
    out = {}
    for k in ks:
        h = hits[:, :k]
        out[f"recall@{k}"] = h.sum(axis=1) / n_rel
        dcg = (h * discount[:k]).sum(axis=1)
        idcg = ideal[np.minimum(k, n_rel).astype(np.int64) - 1]
        out[f"ndcg@{k}"] = dcg / idcg
    return out


def evaluate(readout: np.ndarray, split: SplitDataset, phase: str = "val", ks: Sequence[int] = DEFAULT_KS,
             users: np.ndarray | None = None, chunk: int = 512, workers: int = 1,
             debug: bool = False) -> EvalResult:
    """Rank every unseen item for each user and average the metrics over users with ground truth.

    Validation masks training items; test masks training and validation items.
    """
    if phase in ("val", "validation"):
        truth_set, masks = split.validation, (split.train,)
    elif phase == "test":
        truth_set, masks = split.test, (split.train, split.validation)
    else:
        raise ValueError(f"phase must be 'val' or 'test', got {phase!r}")
    m = split.num_users
    user_emb = readout[:m].astype(np.float64)
    item_emb = readout[m:].astype(np.float64)
    has_truth = truth_set.user_degrees() > 0
    candidates = np.flatnonzero(has_truth) if users is None else np.asarray(users)[has_truth[users]]
    max_k = max(ks)

    def run(block: np.ndarray) -> dict[str, np.ndarray]:
        scores = user_emb[block] @ item_emb.T
        for mask in masks:
            for row, u in enumerate(block.tolist()):
                scores[row, mask.user_items(u)] = -np.inf
        top = top_k(scores, max_k)
        if debug:
            for row, u in enumerate(block.tolist()):
                for mask in masks:
                    assert not np.isin(top[row], mask.user_items(u)).any(), f"user {u}: masked item ranked"
        return _metric_rows(top, [truth_set.user_items(u) for u in block.tolist()], ks)

    blocks = [candidates[s:s + chunk] for s in range(0, candidates.size, chunk)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    keys = [f"{name}@{k}" for k in ks for name in ("recall", "ndcg")]
    per_user = {key: np.concatenate([p[key] for p in parts]) if parts else np.empty(0) for key in keys}
    n = int(candidates.size)

    def mean(key):
        # np.sum is pairwise, so the mean does not depend on how users were chunked
        return float(np.sum(per_user[key]) / n) if n else 0.0

    per_user["users"] = candidates
    return EvalResult({k: mean(f"recall@{k}") for k in ks}, {k: mean(f"ndcg@{k}") for k in ks}, n, per_user)


@dataclass
class SparsityGroups:
    groups: list[np.ndarray]
    interactions: list[int]


def greedy_groups(users: np.ndarray, degrees: np.ndarray, n_groups: int = 5) -> list[np.ndarray]:
    """Sweep users by ascending degree (ties by index), closing a group once its
    interaction count reaches total / n_groups."""
    order = np.lexsort((users, degrees[users]))
    users = users[order]
    target = degrees[users].sum() / n_groups
    groups: list[list[int]] = [[]]
    acc = 0
    for u in users.tolist():
        if len(groups[-1]) and acc >= target and len(groups) < n_groups:
            groups.append([])
            acc = 0
        groups[-1].append(u)
        acc += int(degrees[u])
    return [np.asarray(g, dtype=np.int64) for g in groups if g]


def sparsity_groups(train: InteractionSet, users: np.ndarray | None = None, n_groups: int = 5) -> SparsityGroups:
    deg = train.user_degrees()
    users = np.arange(train.num_users) if users is None else np.asarray(users, dtype=np.int64)
    if users.size < n_groups:
        raise ValueError(f"need at least {n_groups} users to form {n_groups} groups")
    groups = greedy_groups(users, deg, n_groups)
    if len(groups) < n_groups:
        raise ValueError(f"only {len(groups)} non-empty groups could be formed; use fewer groups")
    return SparsityGroups(groups, [int(deg[g].sum()) for g in groups])


def group_recall(result: EvalResult, groups: SparsityGroups, k: int = 10) -> list[float]:
    """Mean Recall@k of the evaluated users in each group."""
    users = result.per_user["users"]
    recall = result.per_user[f"recall@{k}"]
    out = []
    for g in groups.groups:
        sel = np.isin(users, g)
        out.append(float(np.sum(recall[sel]) / sel.sum()) if sel.any() else float("nan"))
    return out
