"""Flat ``key = value`` training configuration with typed validation."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .losses import CLHyper, ContrastScheme

SECTION = "train"
BASELINE = "none"
TAU_GRID = (0.05, 0.075, 0.1, 0.125, 0.15)
LAMBDA1_GRID = (5e-6, 1e-6, 5e-5, 1e-5)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    scheme: str
    lambda1: float
    n_layers: int | None = None
    dim: int = 64
    lr: float = 1e-3
    batch_size: int = 4096
    tau: float = 0.1
    alpha: float = 0.5
    lambda2: float = 1e-4
    patience: int = 10
    eval_every: int = 1
    max_epochs: int = 300
    init_seed: int = 0
    sample_seed: int = 0
    precision: int = 32
    readout: str = "mean"
    workers: int = 1

    @property
    def contrast(self) -> ContrastScheme | None:
        return None if self.scheme == BASELINE else ContrastScheme.parse(self.scheme)

    @property
    def depth(self) -> int:
        """Propagation depth: the explicit ``n_layers`` or the scheme's requirement."""
        if self.n_layers is not None:
            return self.n_layers
        return self.contrast.required_depth if self.contrast is not None else 3

    @property
    def hyper(self) -> CLHyper:
        lam1 = self.lambda1 if self.contrast is not None else 0.0
        return CLHyper(self.tau, self.alpha, lam1, self.lambda2)

    def replace(self, **changes) -> "TrainConfig":
        return validate(dataclasses.replace(self, **changes))

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["depth"] = self.depth
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(dataclasses.asdict(self), sort_keys=True).encode()).hexdigest()[:16]


_REQUIRED = [f.name for f in fields(TrainConfig) if f.default is dataclasses.MISSING]
_TYPES = {"scheme": str, "readout": str, "lambda1": float, "n_layers": int, "dim": int, "lr": float,
          "batch_size": int, "tau": float, "alpha": float, "lambda2": float, "patience": int,
          "eval_every": int, "max_epochs": int, "init_seed": int, "sample_seed": int,
          "precision": int, "workers": int}


def validate(cfg: TrainConfig) -> TrainConfig:
    problems = _range_problems(cfg)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg


def _range_problems(cfg: TrainConfig) -> list[str]:
    problems = []
    if cfg.scheme != BASELINE:
        try:
            scheme = ContrastScheme.parse(cfg.scheme)
        except ValueError as exc:
            problems.append(f"scheme: {exc}")
            scheme = None
        if scheme is not None and cfg.n_layers is not None and cfg.n_layers < scheme.required_depth:
            problems.append(f"n_layers: scheme {scheme.value} needs at least {scheme.required_depth} layers")
    if cfg.n_layers is not None and cfg.n_layers < 0:
        problems.append("n_layers: must be >= 0")
    for name in ("dim", "batch_size", "patience", "eval_every", "max_epochs", "workers"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name}: must be >= 1")
    for name in ("lr", "tau"):
        if not getattr(cfg, name) > 0:
            problems.append(f"{name}: must be > 0")
    for name in ("lambda1", "lambda2"):
        if getattr(cfg, name) < 0:
            problems.append(f"{name}: must be >= 0")
    if not 0.0 <= cfg.alpha <= 1.0:
        problems.append("alpha: must lie in [0, 1]")
    if cfg.precision not in (32, 64):
        problems.append("precision: must be 32 or 64")
    if cfg.readout not in ("mean", "layer0"):
        problems.append("readout: must be 'mean' or 'layer0'")
    return problems


def from_mapping(values: dict[str, Any]) -> TrainConfig:
    problems = []
    known = set(_TYPES)
    for key in values:
        if key not in known:
            problems.append(f"{key}: unknown key")
    for key in _REQUIRED:
        if key not in values:
            problems.append(f"{key}: required key missing")
    parsed = {}
    for key, raw in values.items():
        if key not in known:
            continue
        if key == "n_layers" and (raw is None or str(raw).strip().lower() in ("", "auto", "none")):
            parsed[key] = None
            continue
        try:
            parsed[key] = _TYPES[key](raw) if not isinstance(raw, str) else _coerce(_TYPES[key], raw)
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r} as {_TYPES[key].__name__}")
    if problems:
        # range-check whatever did parse so one run reports every bad key
        stand_in = {"scheme": BASELINE, "lambda1": 0.0, **parsed}
        problems += _range_problems(TrainConfig(**stand_in))
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return validate(TrainConfig(**parsed))


def _coerce(kind, raw: str):
    raw = raw.strip()
    if kind is int:
        as_float = float(raw)
        if not as_float.is_integer():
            raise ValueError(raw)
        return int(as_float)
    return kind(raw)


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> TrainConfig:
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = f"[{SECTION}]\n" + text
    parser.read_string(text)
    if not parser.has_section(SECTION):
        raise ConfigError(f"{path}: missing [{SECTION}] section")
    values: dict[str, Any] = dict(parser.items(SECTION))
    values.update(overrides or {})
    return from_mapping(values)


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"[{SECTION}]"]
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'auto' if value is None else value}")
    return "\n".join(lines) + "\n"
