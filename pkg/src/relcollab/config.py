"""Layered JSON run configuration: defaults <- file <- command-line overrides."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Optional

from .data import ConfigError

CACHE_ENV = "RELCOLLAB_CACHE"

# "data.k": number of folds; null trains on every labeled target sample and
# evaluates on the same set.
DEFAULTS = {
    "phantom": {},
    "data": {
        "dataset": None,
        "k": 5,
        "fold": 0,
        "split_seed": 0,
        "few_shot": False,
    },
    "train": {},
}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            cfg = deep_merge(cfg, json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        cfg = deep_merge(cfg, overrides)
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "relcollab"))


def resolve_dataset(path: str, base: Optional[Path] = None) -> Path:
    """Absolute paths pass through; relative ones are tried against ``base`` then the cache."""
    p = Path(path)
    if p.is_absolute():
        return p
    for root in ([base] if base else []) + [Path.cwd(), cache_dir()]:
        if (root / p).exists():
            return root / p
    return p
