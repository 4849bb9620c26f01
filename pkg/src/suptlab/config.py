"""Flat ``key = value`` run configuration merged with command-line flags."""

from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Unknown key, bad value or missing required setting."""


@dataclass
class RunConfig:
    # paths
    dataset: str = ""
    checkpoint: str = ""
    model: str = ""
    out: str = ""
    # datagen
    num_graphs: int = 500
    n_min: int = 8
    n_max: int = 24
    feature_dim: int = 8
    num_tasks: int = 3
    noise: float = 0.1
    data_seed: int = 0
    # backbone / pretrain
    pretrain_task: str = "edgepred"
    pretrain_epochs: int = 100
    pretrain_lr: float = 5e-3
    pretrain_weight_decay: float = 0.0
    mask_fraction: float = 0.15
    negative_ratio: float = 1.0
    num_layers: int = 3
    hidden_dim: int = 64
    gin_epsilon: float = 0.0
    mlp_per_layer: bool = False
    # tuning
    prompt: str = "supt-soft"
    k: int = 3
    r: float = 0.4
    m: int = 1
    lr: float = 1e-3
    weight_decay: float = 1e-5
    head_layers: int = 1
    pooling: str = "sum"
    epochs: int = 100
    shots: str = "full"
    seed: int = 0
    aux_lp_lambda: float = 0.0
    overlap_normalize: bool = False
    column_softmax: bool = False
    grid: bool = False
    # split / sweep
    split_seed: int = 0
    split_ratios: str = "0.8,0.1,0.1"
    seeds: str = "0-19"
    workers: int = 0
    allow_partial: bool = False
    # verification
    instances: int = 50
    trials: int = 1000
    tol: float = 1e-9
    repetitions: int = 1000
    timing_nodes: int = 50

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key: str, value):
    """Convert a raw (usually string) value to the declared type of ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {kind}, got {value!r}") from None
    return text


def read_config_file(path) -> dict:
    """Parse a flat INI-style file: ``key = value`` lines, ``#`` comments, no sections."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + path.read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raw = dict(parser["run"])
    return {key.replace("-", "_"): coerce(key.replace("-", "_"), val) for key, val in raw.items()}


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values first, then explicit flag values (``None`` means unset)."""
    values = {}
    if path:
        values.update(read_config_file(path))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        values[key] = coerce(key, val)
    cfg = RunConfig(**values)
    return cfg


def parse_seeds(text: str) -> list[int]:
    """``"0-19"`` or ``"1,4,9"`` or a mix of both."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ConfigError(f"no seeds in {text!r}")
    return out


def require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(missing))
