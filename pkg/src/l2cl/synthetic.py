"""Seeded synthetic interaction data with planted preference clusters and a long-tail user degree."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 2000
    num_items: int = 1500
    num_clusters: int = 20
    mean_degree: float = 20.0
    min_degree: int = 5
    max_degree: int = 300
    tail_shape: float = 1.6
    in_cluster: float = 0.8
    item_skew: float = 0.8
    noise_ratio: float = 0.1
    interests: int = 3
    seed: int = 0


def generate(spec: SyntheticSpec = SyntheticSpec()) -> list[tuple[str, str, float]]:
    """Rated interactions ``(user, item, rating)``.

    Each user belongs to ``interests`` clusters and draws most of its items
    from their pooled Zipf-skewed catalogue. User degrees follow a Pareto tail scaled
    to ``mean_degree``. A further ``noise_ratio`` of rows are low-rated
    (< 3) random items that a threshold of 3 removes.
    """
    rng = np.random.default_rng(spec.seed)
    item_cluster = rng.integers(spec.num_clusters, size=spec.num_items)
    user_cluster = rng.integers(spec.num_clusters, size=spec.num_users)
    by_cluster = [np.flatnonzero(item_cluster == c) for c in range(spec.num_clusters)]
    popularity = 1.0 / np.arange(1, spec.num_items + 1) ** spec.item_skew
    popularity = popularity[rng.permutation(spec.num_items)]

    raw = (rng.pareto(spec.tail_shape, size=spec.num_users) + 1.0)
    degrees = raw / raw.mean() * (spec.mean_degree - spec.min_degree) + spec.min_degree
    degrees = np.clip(np.round(degrees), spec.min_degree, spec.max_degree).astype(int)

    rows: list[tuple[str, str, float]] = []
    all_items = np.arange(spec.num_items)
    global_p = popularity / popularity.sum()
    extra = rng.integers(spec.num_clusters, size=(spec.num_users, spec.interests - 1))
    for u in range(spec.num_users):
        pool = by_cluster[user_cluster[u]]
        if spec.interests > 1:
            pool = np.unique(np.concatenate([pool, *(by_cluster[c] for c in extra[u])]))
        p_in = popularity[pool] / popularity[pool].sum()
        n_in = min(rng.binomial(degrees[u], spec.in_cluster), pool.size)
        n_out = degrees[u] - n_in
        chosen = set(rng.choice(pool, size=n_in, replace=False, p=p_in).tolist())
        while len(chosen) < n_in + n_out:
            chosen.add(int(rng.choice(all_items, p=global_p)))
        for i in sorted(chosen):
            rows.append((f"u{u}", f"i{i}", float(rng.integers(3, 6))))
        for i in rng.choice(all_items, size=rng.binomial(degrees[u], spec.noise_ratio)).tolist():
            rows.append((f"u{u}", f"i{i}", float(rng.integers(1, 3))))
    order = rng.permutation(len(rows))
    return [rows[k] for k in order]


def write_raw(path: str | Path, spec: SyntheticSpec = SyntheticSpec()) -> int:
    rows = generate(spec)
    with open(path, "w") as fh:
        for u, i, r in rows:
            fh.write(f"{u}\t{i}\t{r:g}\n")
    return len(rows)
