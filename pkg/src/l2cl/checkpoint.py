"""Versioned training checkpoints (table, Adam moments, RNG state, progress)."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import EmbeddingTable
from .optim import AdamState

FORMAT = "l2cl-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    table: EmbeddingTable
    adam: AdamState
    step: int
    config_hash: str
    best_table: np.ndarray | None = None
    state: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "num_users": ckpt.table.num_users,
        "num_items": ckpt.table.num_items,
        "init_seed": ckpt.table.init_seed,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "adam": {"t": ckpt.adam.t, "lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1,
                 "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "state": ckpt.state,
    }
    arrays = {"weight": ckpt.table.weight, "adam_m": ckpt.adam.m, "adam_v": ckpt.adam.v}
    if ckpt.best_table is not None:
        arrays["best_weight"] = ckpt.best_table
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(npz["header"].tobytes().decode())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not an l2cl checkpoint")
        if header["version"] != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        table = EmbeddingTable(header["num_users"], header["num_items"], npz["weight"].copy(), header["init_seed"])
        a = header["adam"]
        adam = AdamState(npz["adam_m"].copy(), npz["adam_v"].copy(), a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"])
        best = npz["best_weight"].copy() if "best_weight" in npz.files else None
    return Checkpoint(table, adam, header["step"], header["config_hash"], best, header["state"])
