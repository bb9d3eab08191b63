"""Tiny fixed datasets for smoke runs and tests."""

from __future__ import annotations

import numpy as np

from .data import InteractionSet, SplitDataset

# 5 users x 7 items, every node has degree >= 2
TOY_EDGES = [
    (0, 0), (0, 1), (0, 2), (0, 5),
    (1, 1), (1, 3), (1, 4),
    (2, 0), (2, 2), (2, 6),
    (3, 3), (3, 4), (3, 5), (3, 6),
    (4, 0), (4, 5), (4, 6), (4, 2),
]


def toy_interactions() -> InteractionSet:
    users, items = zip(*TOY_EDGES)
    return InteractionSet(5, 7, users, items)


def random_bipartite(num_users: int, num_items: int, density: float, rng: np.random.Generator) -> InteractionSet:
    """Random interaction set in which every user and item has at least one edge."""
    adj = rng.random((num_users, num_items)) < density
    adj[np.arange(num_users), rng.integers(num_items, size=num_users)] = True
    adj[rng.integers(num_users, size=num_items), np.arange(num_items)] = True
    u, i = np.nonzero(adj)
    return InteractionSet(num_users, num_items, u, i)


def toy_split() -> SplitDataset:
    """The toy graph as training data, with one held-out item per user for val and test."""
    train = toy_interactions()
    held_val = [(0, 3), (1, 0), (2, 4), (3, 1), (4, 1)]
    held_test = [(0, 4), (1, 6), (2, 5), (3, 0), (4, 3)]
    val = InteractionSet(5, 7, *zip(*held_val))
    test = InteractionSet(5, 7, *zip(*held_test))
    return SplitDataset(train, val, test, 0)
