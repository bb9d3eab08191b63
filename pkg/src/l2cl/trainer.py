"""Joint BPR + layer-contrast training with early stopping on validation NDCG@10."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import NegativeSampler, SplitDataset
from .evaluation import evaluate
from .graph import PropagationOperator, build_operator
from .losses import total_loss
from .model import EmbeddingTable, forward, init_embeddings, recommendation_embeddings
from .optim import AdamState, adam_step, backward

log = logging.getLogger(__name__)

STOP_METRIC_K = 10


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float = -math.inf
    stop_reason: str = ""

    def metrics(self) -> list[tuple[int, float]]:
        return [(r["epoch"], r["ndcg@10"]) for r in self.epochs if r.get("ndcg@10") is not None]

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch,
                "best_metric": self.best_metric, "stop_reason": self.stop_reason}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(d["epochs"], d["best_epoch"], d["best_metric"], d["stop_reason"])


def early_stop(metrics: list[float], patience: int) -> tuple[bool, int]:
    """(stop?, index of the best evaluation) for a sequence of validation scores.

    The best is the first strict maximum; training stops once ``patience``
    evaluations in a row failed to beat it.
    """
    if not metrics:
        raise ValueError("early_stop needs at least one validation record")
    best = 0
    for k, value in enumerate(metrics):
        if value > metrics[best]:
            best = k
    return len(metrics) - 1 - best >= patience, best


@dataclass
class TrainResult:
    table: EmbeddingTable
    history: TrainHistory
    last: Checkpoint


def _dtype(cfg: TrainConfig):
    return np.float64 if cfg.precision == 64 else np.float32


def train(cfg: TrainConfig, split: SplitDataset, op: PropagationOperator | None = None,
          resume: Checkpoint | str | Path | None = None, stream: TextIO | None = None,
          checkpoint_path: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train and return the table from the best validation epoch.

    ``stream`` receives one JSON line per epoch. ``checkpoint_path`` gets a
    checkpoint after every epoch, from which ``resume`` continues exactly.
    """
    op = op if op is not None else build_operator(split.train)
    scheme, hyper, depth = cfg.contrast, cfg.hyper, cfg.depth
    sampler = NegativeSampler(split.train)
    n_batches = math.ceil(len(split.train) / cfg.batch_size)

    if resume is not None:
        ckpt = load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume
        if ckpt.config_hash != cfg.digest():
            raise TrainingError("checkpoint was produced by a different config")
        table, adam = ckpt.table.copy(), ckpt.adam.copy()
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.state["rng"]
        history = TrainHistory.from_dict(ckpt.state["history"])
        best_weight = ckpt.best_table.copy() if ckpt.best_table is not None else table.weight.copy()
        start_epoch, step = ckpt.state["epoch"] + 1, ckpt.step
    else:
        table = init_embeddings(split.num_users, split.num_items, cfg.dim, cfg.init_seed, _dtype(cfg))
        adam = AdamState.zeros_like(table.weight, cfg.lr)
        rng = np.random.default_rng(cfg.sample_seed)
        history = TrainHistory()
        best_weight = table.weight.copy()
        start_epoch, step = 0, 0

    ckpt = None
    for epoch in range(start_epoch, cfg.max_epochs):
        if history.stop_reason:
            break
        tic = time.perf_counter()
        sums = {"loss": 0.0, "bpr": 0.0, "cl": 0.0, "reg": 0.0}
        for b in range(n_batches):
            batch = sampler.sample(cfg.batch_size, rng)
            stack = forward(table, op, depth)
            out = total_loss(stack, batch, scheme, hyper, cfg.readout)
            if not math.isfinite(out.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: "
                                    f"total={out.value} components={out.parts}")
            rows, grads = backward(op, depth, out.grad, cfg.dim)
            adam_step(adam, table.weight, rows, grads)
            step += 1
            sums["loss"] += out.value
            for key in ("bpr", "cl", "reg"):
                sums[key] += out.parts[key]
        record = {"epoch": epoch, **sums, "time": time.perf_counter() - tic, "ndcg@10": None}
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.max_epochs:
            emb = recommendation_embeddings(forward(table, op, depth), cfg.readout)
            res = evaluate(emb, split, "val", (STOP_METRIC_K,), workers=cfg.workers)
            record["ndcg@10"] = res.ndcg[STOP_METRIC_K]
            record["recall@10"] = res.recall[STOP_METRIC_K]
            evals = [v for _, v in history.metrics()] + [record["ndcg@10"]]
            stop, best = early_stop(evals, cfg.patience)
            if best == len(evals) - 1:
                history.best_epoch, history.best_metric = epoch, record["ndcg@10"]
                best_weight = table.weight.copy()
            if stop:
                history.stop_reason = f"early stop: no NDCG@10 improvement in {cfg.patience} evaluations"
        history.epochs.append(record)
        if epoch + 1 == cfg.max_epochs and not history.stop_reason:
            history.stop_reason = "max_epochs"
        log.debug("epoch %d %s", epoch, record)
        if stream is not None:
            stream.write(json.dumps(record) + "\n")
            stream.flush()
        if on_epoch is not None:
            on_epoch(record)
        ckpt = Checkpoint(table, adam, step, cfg.digest(), best_weight,
                          {"epoch": epoch, "rng": rng.bit_generator.state, "history": history.to_dict()})
        if checkpoint_path is not None:
            save_checkpoint(ckpt, checkpoint_path)

    if ckpt is None:
        ckpt = Checkpoint(table, adam, step, cfg.digest(), best_weight,
                          {"epoch": start_epoch - 1, "rng": rng.bit_generator.state, "history": history.to_dict()})
    best = EmbeddingTable(table.num_users, table.num_items, best_weight.copy(), table.init_seed)
    return TrainResult(best, history, ckpt)
