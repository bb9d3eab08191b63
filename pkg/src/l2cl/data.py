"""Implicit-feedback data pipeline: load, threshold, k-core, remap, split, sample."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed input files or degenerate filtering results."""


@dataclass(frozen=True)
class RatingRecord:
    user_raw: str
    item_raw: str
    rating: float | None = None
    timestamp: int | None = None


@dataclass(frozen=True)
class ColumnSpec:
    """Column layout of a delimiter-separated interaction file (0-based indices)."""

    user: int = 0
    item: int = 1
    rating: int | None = None
    timestamp: int | None = None
    delimiter: str = "\t"
    skip_header: bool = False


class InteractionSet:
    """Deduplicated (user, item) pairs over contiguous index spaces.

    ``users`` and ``items`` are parallel int64 arrays sorted by user, then item.
    """

    def __init__(self, num_users: int, num_items: int, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise ValueError("users and items must have the same length")
        if users.size and (users.min() < 0 or users.max() >= num_users):
            raise ValueError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= num_items):
            raise ValueError("item index out of range")
        key = users * max(num_items, 1) + items
        key, first = np.unique(key, return_index=True)
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.users = users[first]
        self.items = items[first]
        self._indptr = np.searchsorted(self.users, np.arange(self.num_users + 1))

    def __len__(self) -> int:
        return int(self.users.size)

    def __repr__(self) -> str:
        return f"InteractionSet(M={self.num_users}, N={self.num_items}, pairs={len(self)})"

    def user_items(self, u: int) -> np.ndarray:
        """Items of user ``u`` in ascending order."""
        return self.items[self._indptr[u]:self._indptr[u + 1]]

    @property
    def indptr(self) -> np.ndarray:
        return self._indptr

    def user_degrees(self) -> np.ndarray:
        return np.diff(self._indptr)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def contains(self, users, items) -> np.ndarray:
        """Vectorised membership test for (user, item) pairs."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        key = users * max(self.num_items, 1) + items
        ref = self.users * max(self.num_items, 1) + self.items
        pos = np.searchsorted(ref, key)
        pos = np.minimum(pos, max(ref.size - 1, 0))
        if ref.size == 0:
            return np.zeros(key.shape, dtype=bool)
        return ref[pos] == key

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist()))


@dataclass
class SplitDataset:
    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    split_seed: int

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items


@dataclass
class TrainBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    @property
    def size(self) -> int:
        return int(self.users.size)

    @property
    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.pos_items.tolist(), self.neg_items.tolist()))


@dataclass
class IdMaps:
    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)

    def user_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.users)}

    def item_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.items)}


def load_interactions(path: str | Path, columns: ColumnSpec = ColumnSpec()) -> list[RatingRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    records = []
    needed = max(c for c in (columns.user, columns.item, columns.rating, columns.timestamp) if c is not None)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=columns.delimiter)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and columns.skip_header:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) <= needed:
                raise DataError(f"{path}:{lineno}: expected at least {needed + 1} columns, got {len(row)}")
            rating = timestamp = None
            if columns.rating is not None:
                try:
                    rating = float(row[columns.rating])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric rating {row[columns.rating]!r}") from None
                if not math.isfinite(rating):
                    raise DataError(f"{path}:{lineno}: non-finite rating {row[columns.rating]!r}")
            if columns.timestamp is not None:
                try:
                    timestamp = int(float(row[columns.timestamp]))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad timestamp {row[columns.timestamp]!r}") from None
            records.append(RatingRecord(row[columns.user].strip(), row[columns.item].strip(), rating, timestamp))
    if not records:
        raise DataError(f"{path}: file contains no interactions")
    return records


def threshold_implicit(records: Iterable[RatingRecord], threshold: float | None) -> list[tuple[str, str]]:
    """Keep records rated at least ``threshold``; unrated records always pass."""
    if threshold is not None and math.isnan(threshold):
        raise ValueError("threshold must not be NaN")
    out = []
    for rec in records:
        if threshold is None or rec.rating is None or rec.rating >= threshold:
            out.append((rec.user_raw, rec.item_raw))
    return out


def _dedup(pairs: Iterable[tuple]) -> list[tuple]:
    return list(dict.fromkeys(pairs))


def k_core_filter(pairs: Iterable[tuple], k_user: int, k_item: int | None = None) -> list[tuple]:
    """Peel users/items below the degree minima until a fixed point.

    Duplicates collapse first; relative order of surviving pairs is kept.
    """
    if k_item is None:
        k_item = k_user
    if k_user < 1 or k_item < 1:
        raise ValueError("k_user and k_item must be >= 1")
    current = _dedup(pairs)
    while True:
        udeg: dict = defaultdict(int)
        ideg: dict = defaultdict(int)
        for u, i in current:
            udeg[u] += 1
            ideg[i] += 1
        kept = [(u, i) for u, i in current if udeg[u] >= k_user and ideg[i] >= k_item]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise DataError(f"k-core filtering (k_user={k_user}, k_item={k_item}) removed every interaction; use a smaller k")
    return current


def remap_ids(pairs: Sequence[tuple]) -> tuple[InteractionSet, IdMaps]:
    if not pairs:
        raise DataError("cannot remap an empty interaction list")
    umap: dict = {}
    imap: dict = {}
    users = np.empty(len(pairs), dtype=np.int64)
    items = np.empty(len(pairs), dtype=np.int64)
    for n, (u, i) in enumerate(pairs):
        users[n] = umap.setdefault(u, len(umap))
        items[n] = imap.setdefault(i, len(imap))
    maps = IdMaps(users=list(umap), items=list(imap))
    return InteractionSet(len(umap), len(imap), users, items), maps


def split_counts(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Per-user (train, val, test) sizes: floor val/test, force one test item when n >= 3."""
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    if n >= 3:
        n_test = max(n_test, 1)
    n_train = n - n_val - n_test
    if n_train < 1:
        # only reachable with extreme ratios
        n_val = max(0, n - 1 - n_test)
        n_train = n - n_val - n_test
    return n_train, n_val, n_test


def split_user_based(iset: InteractionSet, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> SplitDataset:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    owners: list[list[np.ndarray]] = [[], [], []]
    for u in range(iset.num_users):
        items = iset.user_items(u)
        if items.size == 0:
            raise DataError(f"user {u} has no interactions")
        perm = items[rng.permutation(items.size)]
        n_train, n_val, _ = split_counts(items.size, ratios)
        chunks = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
        for k, chunk in enumerate(chunks):
            parts[k].append(chunk)
            owners[k].append(np.full(chunk.size, u, dtype=np.int64))
    sets = [
        InteractionSet(iset.num_users, iset.num_items, np.concatenate(owners[k]), np.concatenate(parts[k]))
        for k in range(3)
    ]
    return SplitDataset(sets[0], sets[1], sets[2], seed)


class NegativeSampler:
    """Uniform BPR triple sampler over a training InteractionSet."""

    max_rejections = 100

    def __init__(self, train: InteractionSet):
        if len(train) == 0:
            raise DataError("training set is empty")
        self.train = train
        degrees = train.user_degrees()
        self._saturated = degrees >= train.num_items
        if self._saturated[train.users].all():
            raise DataError("every user has interacted with every item; no negatives exist")

    def _negative(self, u: int, rng: np.random.Generator) -> int:
        n_items = self.train.num_items
        seen = self.train.user_items(u)
        for _ in range(self.max_rejections):
            j = int(rng.integers(n_items))
            k = np.searchsorted(seen, j)
            if k >= seen.size or seen[k] != j:
                return j
        complement = np.setdiff1d(np.arange(n_items), seen, assume_unique=True)
        return int(complement[rng.integers(complement.size)])

    def sample(self, size: int, rng: np.random.Generator) -> TrainBatch:
        train = self.train
        users = np.empty(size, dtype=np.int64)
        pos = np.empty(size, dtype=np.int64)
        filled = 0
        while filled < size:
            idx = rng.integers(len(train), size=size - filled)
            u = train.users[idx]
            ok = ~self._saturated[u]
            take = int(ok.sum())
            users[filled:filled + take] = u[ok]
            pos[filled:filled + take] = train.items[idx[ok]]
            filled += take
        neg = rng.integers(train.num_items, size=size)
        clash = train.contains(users, neg)
        for k in np.flatnonzero(clash):
            neg[k] = self._negative(int(users[k]), rng)
        return TrainBatch(users, pos, neg)


def sample_bpr_batch(split: SplitDataset | InteractionSet, size: int, rng: np.random.Generator) -> TrainBatch:
    train = split.train if isinstance(split, SplitDataset) else split
    return NegativeSampler(train).sample(size, rng)


# -- on-disk split manifest ---------------------------------------------------

SPLIT_FILES = {"train": "train.tsv", "validation": "valid.tsv", "test": "test.tsv"}


def write_split(split: SplitDataset, maps: IdMaps, out_dir: str | Path, meta: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, fname in SPLIT_FILES.items():
        part = getattr(split, name)
        with (out_dir / fname).open("w") as fh:
            for u, i in zip(part.users.tolist(), part.items.tolist()):
                fh.write(f"{u}\t{i}\n")
    for side, raw in (("users", maps.users), ("items", maps.items)):
        with (out_dir / f"{side}.map.tsv").open("w") as fh:
            for idx, r in enumerate(raw):
                fh.write(f"{r}\t{idx}\n")
    total = len(split.train) + len(split.validation) + len(split.test)
    metadata = {
        "num_users": split.num_users,
        "num_items": split.num_items,
        "num_interactions": total,
        "density": total / (split.num_users * split.num_items),
        "train": len(split.train),
        "validation": len(split.validation),
        "test": len(split.test),
        "split_seed": split.split_seed,
    }
    metadata.update(meta or {})
    (out_dir / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return metadata


def _read_pairs(path: Path, num_users: int, num_items: int) -> InteractionSet:
    if path.stat().st_size == 0:
        return InteractionSet(num_users, num_items, [], [])
    arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    return InteractionSet(num_users, num_items, arr[:, 0], arr[:, 1])


def read_split(data_dir: str | Path) -> tuple[SplitDataset, dict]:
    data_dir = Path(data_dir)
    meta_path = data_dir / "metadata.json"
    if not meta_path.exists():
        raise DataError(f"{data_dir}: no metadata.json; run `l2cl prepare` first")
    meta = json.loads(meta_path.read_text())
    m, n = meta["num_users"], meta["num_items"]
    parts = {name: _read_pairs(data_dir / fname, m, n) for name, fname in SPLIT_FILES.items()}
    return SplitDataset(parts["train"], parts["validation"], parts["test"], meta["split_seed"]), meta
