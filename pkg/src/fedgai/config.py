"""Experiment configuration: JSON schema, defaults and validation.

Every key is optional; unknown keys are rejected so that typos in sweep
scripts fail loudly. Validation raises :class:`ConfigError` naming the
offending field before any work starts.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .netsim import LinkModel
from .synthdata import StyleProfile
from .training import STRATEGIES

DEFAULT_CLIENTS = (
    {"name": "A", "stroke_width_px": 1.0, "seed": 1},
    {"name": "B", "stroke_width_px": 4.0, "corner_rounding": 0.5, "seed": 2},
)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class FusionConfig:
    requesters: list[str] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    clients: list[StyleProfile] = field(default_factory=lambda: [StyleProfile(**c) for c in DEFAULT_CLIENTS])
    n_pairs: int = 200
    resolution: int = 32
    strategy: str = "fedgai"
    rounds: int = 11
    n_iter: int = 11
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.0
    beta: float = 0.1
    mu: float = 0.01
    gamma_gram: float = 50.0
    gamma_adv: float = 1.0
    gamma_clip: float = 25.0
    seed: int = 0
    encoder_seed: int = 0
    pretrain_epochs: int = 2
    distill_epochs: int = 2
    stop_on_plateau: bool = False
    plateau_tol: float = 0.01
    plateau_window: int = 3
    sweep_niter: list[int] = field(default_factory=lambda: [2, 5, 8, 11])
    sweep_clients: list[int] = field(default_factory=lambda: [2, 4, 6, 8])
    fusion: FusionConfig = field(default_factory=FusionConfig)
    link: LinkModel = field(default_factory=LinkModel)
    output_dir: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["clients"] = [asdict(c) for c in self.clients]
        return d


_SCALARS = {f.name: f.type for f in fields(ExperimentConfig)}
_INT_KEYS = {"n_pairs", "resolution", "rounds", "n_iter", "batch_size", "seed", "encoder_seed",
             "pretrain_epochs", "distill_epochs", "plateau_window"}
_FLOAT_KEYS = {"learning_rate", "momentum", "beta", "mu", "gamma_gram", "gamma_adv", "gamma_clip", "plateau_tol"}


def _want_int(name, v, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(name, f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {v}")
    return v


def _want_float(name, v, minimum=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(name, f"expected a number, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {v}")
    return float(v)


def _known(name: str, raw: dict, allowed) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(name, f"expected an object, got {type(raw).__name__}")
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}" if name else key, "unknown key")


def _client(i: int, raw: dict) -> StyleProfile:
    allowed = {f.name for f in fields(StyleProfile)}
    _known(f"clients[{i}]", raw, allowed)
    try:
        return StyleProfile(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"clients[{i}]", str(exc)) from None


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a decoded JSON object into an :class:`ExperimentConfig`."""
    _known("", raw, _SCALARS)
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in _INT_KEYS:
            setattr(cfg, key, _want_int(key, value, minimum=0))
        elif key in _FLOAT_KEYS:
            setattr(cfg, key, _want_float(key, value, minimum=0))
        elif key == "clients":
            if not isinstance(value, list) or not value:
                raise ConfigError("clients", "expected a nonempty list of style profiles")
            cfg.clients = [_client(i, c) for i, c in enumerate(value)]
        elif key == "strategy":
            if value not in STRATEGIES:
                raise ConfigError("strategy", f"expected one of {list(STRATEGIES)}, got {value!r}")
            cfg.strategy = value
        elif key in ("stop_on_plateau",):
            if not isinstance(value, bool):
                raise ConfigError(key, f"expected true or false, got {value!r}")
            setattr(cfg, key, value)
        elif key in ("sweep_niter", "sweep_clients"):
            if not isinstance(value, list) or not value:
                raise ConfigError(key, "expected a nonempty list of integers")
            setattr(cfg, key, [_want_int(f"{key}[{i}]", v, minimum=0 if key == "sweep_niter" else 1) for i, v in enumerate(value)])
        elif key == "fusion":
            _known("fusion", value, {"requesters", "sources"})
            for part in ("requesters", "sources"):
                ids = value.get(part, [])
                if not isinstance(ids, list) or not all(isinstance(x, str) for x in ids):
                    raise ConfigError(f"fusion.{part}", "expected a list of client names")
            cfg.fusion = FusionConfig(list(value.get("requesters", [])), list(value.get("sources", [])))
        elif key == "link":
            _known("link", value, {f.name for f in fields(LinkModel)})
            try:
                cfg.link = LinkModel(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError("link", str(exc)) from None
        elif key == "output_dir":
            if value is not None and not isinstance(value, str):
                raise ConfigError("output_dir", "expected a path string")
            cfg.output_dir = value
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.resolution <= 0 or cfg.resolution % 8:
        raise ConfigError("resolution", f"must be a positive multiple of 8, got {cfg.resolution}")
    for key in ("n_pairs", "batch_size", "plateau_window"):
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be >= 1")
    if cfg.momentum >= 1:
        raise ConfigError("momentum", "must be < 1")
    if cfg.strategy == "fedprox" and cfg.mu <= 0:
        raise ConfigError("mu", "fedprox needs a positive proximal coefficient")
    names = [c.name for c in cfg.clients]
    if len(set(names)) != len(names):
        raise ConfigError("clients", f"client names must be unique, got {names}")
    for part in ("requesters", "sources"):
        for cid in getattr(cfg.fusion, part):
            if cid not in names:
                raise ConfigError(f"fusion.{part}", f"unknown client {cid!r}")


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return parse_config({})
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"no such file {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return parse_config(raw)
