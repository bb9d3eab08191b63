"""Command-line entry point: prepare, train, eval, grid, sweep, bench, export, synth."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import BASELINE, TAU_GRID, ConfigError, TrainConfig, dump_config, from_mapping, load_config
from .data import (SPLIT_FILES, ColumnSpec, DataError, k_core_filter, load_interactions, read_split,
                   remap_ids, split_user_based, threshold_implicit, write_split)
from .evaluation import DEFAULT_KS, evaluate, group_recall, sparsity_groups
from .graph import build_operator, load_operator, save_operator
from .losses import ContrastScheme
from .model import EmbeddingTable, export_binary, export_text, forward, recommendation_embeddings
from .synthetic import SyntheticSpec, write_raw
from .trainer import train

log = logging.getLogger("l2cl")

GRID_ROWS = [("LightGCN", BASELINE)] + [(s.value, s.value) for s in ContrastScheme]
SWEEPABLE = {"tau": float, "alpha": float, "lambda1": float}


class CommandError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------

def _write_report(records: list[dict], out: Path, stem: str, fmt: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("json", "both"):
        path = out / f"{stem}.json"
        path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
        written.append(path)
    if fmt in ("csv", "both"):
        path = out / f"{stem}.csv"
        keys = sorted({k for r in records for k in r})
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            writer.writeheader()
            for r in records:
                writer.writerow({k: _fmt(r.get(k)) for k in keys})
        written.append(path)
    return written


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else value


def dataset_fingerprint(data_dir: Path) -> str:
    h = hashlib.sha256()
    for name in sorted(SPLIT_FILES.values()) + ["metadata.json"]:
        h.update(name.encode())
        h.update((data_dir / name).read_bytes())
    return h.hexdigest()


def _artifact_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _load_data(data_dir: str | Path):
    data_dir = Path(data_dir)
    split, meta = read_split(data_dir)
    cache = data_dir / "operator.bin"
    if cache.exists():
        op = load_operator(cache)
    else:
        op = build_operator(split.train)
    return split, meta, op


def _config(args, **overrides) -> TrainConfig:
    extra = dict(overrides)
    if getattr(args, "seed", None) is not None:
        extra.setdefault("init_seed", args.seed)
        extra.setdefault("sample_seed", args.seed)
    if getattr(args, "workers", None) is not None:
        extra.setdefault("workers", args.workers)
    if getattr(args, "precision", None) is not None:
        extra.setdefault("precision", args.precision)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        extra[key.strip()] = value.strip()
    if args.config is None:
        raise ConfigError("--config is required")
    return load_config(args.config, extra)


def _train_and_test(cfg: TrainConfig, split, op, out: Path | None = None, stream=None):
    ckpt_path = out / "checkpoint.npz" if out is not None else None
    result = train(cfg, split, op, stream=stream, checkpoint_path=ckpt_path)
    emb = recommendation_embeddings(forward(result.table, op, cfg.depth), cfg.readout)
    test = evaluate(emb, split, "test", DEFAULT_KS, workers=cfg.workers)
    return result, emb, test


def _metric_row(name: str, res) -> dict:
    row = {"variant": name}
    for k in sorted(res.recall):
        row[f"recall@{k}"] = res.recall[k]
        row[f"ndcg@{k}"] = res.ndcg[k]
    return row


# -- commands ------------------------------------------------------------------

def cmd_prepare(args) -> int:
    columns = ColumnSpec(user=args.user_col, item=args.item_col, rating=args.rating_col,
                         timestamp=args.timestamp_col, delimiter={"tab": "\t", "comma": ","}[args.delimiter],
                         skip_header=args.skip_header)
    records = load_interactions(args.raw, columns)
    pairs = threshold_implicit(records, args.threshold)
    k_user = args.k_user if args.k_user is not None else args.k
    k_item = args.k_item if args.k_item is not None else args.k
    pairs = k_core_filter(pairs, k_user, k_item)
    iset, maps = remap_ids(pairs)
    split = split_user_based(iset, (0.8, 0.1, 0.1), args.seed)
    out = Path(args.out)
    meta = write_split(split, maps, out, {
        "threshold": args.threshold, "k_user": k_user, "k_item": k_item,
        "source": Path(args.raw).name,
        "source_sha256": hashlib.sha256(Path(args.raw).read_bytes()).hexdigest(),
        "raw_records": len(records),
    })
    save_operator(build_operator(split.train), out / "operator.bin")
    print(f"users={meta['num_users']} items={meta['num_items']} interactions={meta['num_interactions']} "
          f"density={meta['density']:.5f} -> {out}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(num_users=args.users, num_items=args.items, mean_degree=args.mean_degree, seed=args.seed)
    n = write_raw(args.out, spec)
    print(f"wrote {n} rated interactions to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    split, meta, op = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "dataset": str(Path(args.data).resolve()),
        "dataset_fingerprint": dataset_fingerprint(Path(args.data)),
        "version": _artifact_version(),
        "layout": {"config": "config.ini", "history": "history.jsonl", "checkpoint": "checkpoint.npz",
                   "report": "report.{json,csv}"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with (out / "history.jsonl").open("w") as stream:
        result, _, test = _train_and_test(cfg, split, op, out, stream)
    records = test.records("test")
    records.append({"phase": "val", "metric": "ndcg", "k": 10, "value": result.history.best_metric})
    _write_report(records, out, "report", args.format)
    (out / "summary.json").write_text(json.dumps({
        "best_epoch": result.history.best_epoch, "epochs": len(result.history.epochs),
        "stop_reason": result.history.stop_reason}, indent=2) + "\n")
    print(f"best epoch {result.history.best_epoch}: test recall@10={test.recall[10]:.4f} "
          f"ndcg@10={test.ndcg[10]:.4f}")
    return 0


def _run_table(run_dir: Path, which: str = "best") -> tuple[TrainConfig, EmbeddingTable]:
    cfg = load_config(run_dir / "config.ini")
    ckpt = load_checkpoint(run_dir / "checkpoint.npz")
    weight = ckpt.best_table if which == "best" and ckpt.best_table is not None else ckpt.table.weight
    return cfg, EmbeddingTable(ckpt.table.num_users, ckpt.table.num_items, weight, ckpt.table.init_seed)


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg, table = _run_table(run)
    split, _, op = _load_data(args.data)
    emb = recommendation_embeddings(forward(table, op, cfg.depth), cfg.readout)
    records = []
    for phase in args.phase:
        res = evaluate(emb, split, phase, DEFAULT_KS, workers=args.workers or cfg.workers)
        records.extend(res.records(phase))
        if args.groups and phase == "test":
            groups = sparsity_groups(split.train, res.per_user["users"], args.groups)
            for g, (value, members, count) in enumerate(zip(group_recall(res, groups, 10), groups.groups,
                                                            groups.interactions), start=1):
                records.append({"phase": phase, "metric": "recall", "k": 10, "group": f"G{g}",
                                "users": int(members.size), "interactions": count, "value": value})
    _write_report(records, Path(args.out or run), "eval", args.format)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return 0


def cmd_grid(args) -> int:
    base = _config(args)
    split, _, op = _load_data(args.data)
    rows = []
    for name, scheme in GRID_ROWS:
        if scheme == BASELINE:
            cfg = base.replace(scheme=BASELINE, lambda1=0.0, n_layers=3)
        else:
            cfg = base.replace(scheme=scheme, n_layers=None)
        log.info("grid: %s (depth %d)", name, cfg.depth)
        _, _, test = _train_and_test(cfg, split, op)
        rows.append({**_metric_row(name, test), "depth": cfg.depth})
        print(json.dumps(rows[-1], sort_keys=True), flush=True)
    _write_report(rows, Path(args.out), "grid", args.format)
    return 0


def cmd_sweep(args) -> int:
    if args.param not in SWEEPABLE:
        raise CommandError(f"unknown sweep parameter {args.param!r}; valid: {sorted(SWEEPABLE)}")
    values = [SWEEPABLE[args.param](v) for v in args.values.split(",")] if args.values else None
    if values is None:
        if args.param != "tau":
            raise CommandError("--values is required for this parameter")
        values = list(TAU_GRID)
    if not all(np.isfinite(values)):
        raise CommandError("sweep values must be finite")
    base = _config(args)
    split, _, op = _load_data(args.data)
    rows = []
    for value in sorted(values):
        cfg = base.replace(**{args.param: value})
        _, _, test = _train_and_test(cfg, split, op)
        row = _metric_row(base.scheme, test)
        row[args.param] = value
        rows.append(row)
        print(json.dumps(row, sort_keys=True), flush=True)
    _write_report(rows, Path(args.out), f"sweep_{args.param}", args.format)
    return 0


def _parse_bench_entry(entry: str) -> tuple[str, int | None]:
    # "U0_I1" or "none:3" (scheme:layers)
    name, _, layers = entry.partition(":")
    return name, int(layers) if layers else None


def bench_schemes(base: TrainConfig, split, op, entries: Sequence[str], repetitions: int,
                  full: bool = False) -> list[dict]:
    rows = []
    for entry in entries:
        scheme, layers = _parse_bench_entry(entry)
        changes = {"scheme": scheme, "n_layers": layers}
        if scheme == BASELINE:
            changes["lambda1"] = 0.0
            changes.setdefault("n_layers", 3)
            if changes["n_layers"] is None:
                changes["n_layers"] = 3
        if not full:
            # one warm-up epoch plus the timed ones; a single evaluation at the end
            changes.update(max_epochs=repetitions + 1, eval_every=repetitions + 1, patience=repetitions + 1)
        cfg = base.replace(**changes)
        tic = time.perf_counter()
        result = train(cfg, split, op)
        total = time.perf_counter() - tic
        times = np.array([r["time"] for r in result.history.epochs])
        timed = times if full else times[1:]
        row = {"scheme": entry, "depth": cfg.depth, "epochs_timed": int(timed.size),
               "median_epoch_s": float(np.median(timed)),
               "iqr_epoch_s": float(np.subtract(*np.percentile(timed, [75, 25]))) if timed.size > 1 else None}
        if full:
            row.update(epochs_to_converge=result.history.best_epoch + 1 if result.history.best_epoch is not None
                       else None, total_s=total, best_val_ndcg10=result.history.best_metric)
        rows.append(row)
    return rows


def cmd_bench(args) -> int:
    base = _config(args)
    if args.batch_size is not None:
        base = base.replace(batch_size=args.batch_size)
    split, _, op = _load_data(args.data)
    rows = bench_schemes(base, split, op, args.schemes.split(","), args.repetitions, args.full)
    if len(rows) >= 2:
        ref = rows[-1]["median_epoch_s"]
        for r in rows:
            r["ratio_to_last"] = r["median_epoch_s"] / ref
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    _write_report(rows, Path(args.out), "bench", args.format)
    return 0


def cmd_export(args) -> int:
    run = Path(args.run)
    cfg, table = _run_table(run)
    if args.format not in ("text", "binary"):
        raise CommandError(f"unknown export format {args.format!r}; use 'text' or 'binary'")
    if args.which == "readout":
        split, _, op = _load_data(args.data)
        emb = recommendation_embeddings(forward(table, op, cfg.depth), cfg.readout)
    else:
        emb = table.weight
    nodes = None
    if args.sample is not None:
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)
        nodes = np.sort(rng.choice(table.num_users, size=min(args.sample, table.num_users), replace=False))
    out = Path(args.out)
    if args.format == "text":
        export_text(emb, out, nodes)
    else:
        export_binary(emb if nodes is None else emb[nodes], table.num_users if nodes is None else nodes.size, out)
    print(f"wrote {out}")
    return 0


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="training config (flat key = value file)")
    common.add_argument("--seed", type=int, help="overrides init_seed and sample_seed")
    common.add_argument("--workers", type=int, help="worker cap; 1 is the deterministic reference mode")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("--out", help="output directory (file for export/synth)")
    common.add_argument("--format", help="reports: json, csv or both (default both); export: text or binary")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="l2cl", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="filter, remap and split a raw interaction file")
    p.add_argument("raw")
    p.add_argument("--delimiter", choices=("tab", "comma"), default="tab")
    p.add_argument("--user-col", type=int, default=0)
    p.add_argument("--item-col", type=int, default=1)
    p.add_argument("--rating-col", type=int)
    p.add_argument("--timestamp-col", type=int)
    p.add_argument("--skip-header", action="store_true")
    p.add_argument("--threshold", type=float, help="keep ratings >= threshold")
    p.add_argument("--k", type=int, default=5, help="k-core minimum for both sides")
    p.add_argument("--k-user", type=int)
    p.add_argument("--k-item", type=int)
    p.set_defaults(func=cmd_prepare, seed=0)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic rated-interaction file")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=1500)
    p.add_argument("--mean-degree", type=float, default=20.0)
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("train", parents=[common], help="train one model and report test metrics")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--phase", nargs="+", default=["val", "test"], choices=("val", "test"))
    p.add_argument("--groups", type=int, default=0, help="also report Recall@10 for this many sparsity groups")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", parents=[common], help="LightGCN baseline plus the five contrast schemes")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("sweep", parents=[common], help="one training run per hyperparameter value")
    p.add_argument("--data", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", help="comma separated; defaults to the temperature grid for tau")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", parents=[common], help="per-epoch wall time per scheme")
    p.add_argument("--data", required=True)
    p.add_argument("--schemes", default="U0_I1,none:3", help="comma separated scheme[:layers] entries")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--full", action="store_true", help="train to convergence and report epochs/total time")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", parents=[common], help="write embeddings of a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", help="needed for readout embeddings")
    p.add_argument("--which", choices=("readout", "layer0"), default="readout")
    p.add_argument("--sample", type=int, help="export a seeded subsample of this many users")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command in ("prepare", "synth", "train", "grid", "sweep", "bench", "export") and not args.out:
        parser.error(f"{args.command}: --out is required")
    if args.command == "export" and args.which == "readout" and not args.data:
        parser.error("export: --data is required for readout embeddings")
    if args.format is None:
        args.format = "text" if args.command == "export" else "both"
    elif args.command != "export" and args.format not in ("json", "csv", "both"):
        parser.error(f"--format must be json, csv or both, got {args.format!r}")
    try:
        return args.func(args)
    except (ConfigError, DataError, CommandError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
