"""Flat ``key = value`` experiment files.

Values are JSON literals (numbers, ``true``/``false``, lists, quoted
strings); anything that does not parse as JSON is kept as a bare string.
``#`` starts a comment. Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import fields, replace
from pathlib import Path

from .model import ModelConfig
from .trainer import GridConfig, TrainConfig

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
RUN_KEYS = {"train_data", "val_data", "out", "profile"}
GRID_KEYS = {"blocks_short", "blocks_long", "test_data"}


class ConfigError(ValueError):
    pass


def parse_flat(text: str) -> dict:
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {no}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _split(values: dict, allowed: set):
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    model = {k: v for k, v in values.items() if k in MODEL_KEYS}
    train = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    rest = {k: v for k, v in values.items() if k not in MODEL_KEYS | TRAIN_KEYS}
    return model, train, rest


def _build(model_kw, train_kw):
    try:
        mc = ModelConfig(**model_kw)
        tc = TrainConfig.from_dict(train_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    errs = tc.violations()
    if errs:
        raise ConfigError("; ".join(errs))
    if mc.violations():
        raise ConfigError("; ".join(mc.violations()))
    return mc, tc


def load_run_config(path) -> tuple:
    """Return ``(ModelConfig, TrainConfig, run settings dict)``."""
    model_kw, train_kw, rest = _split(parse_flat(Path(path).read_text()), MODEL_KEYS | TRAIN_KEYS | RUN_KEYS)
    mc, tc = _build(model_kw, train_kw)
    return mc, tc, rest


def load_grid_config(path) -> tuple:
    """Return ``(GridConfig, extra settings dict)``."""
    values = parse_flat(Path(path).read_text())
    model_kw, train_kw, rest = _split(values, MODEL_KEYS | TRAIN_KEYS | RUN_KEYS | GRID_KEYS)
    base = GridConfig()
    mc, tc = _build({**base.model.to_dict(), **model_kw}, {**base.train.to_dict(), **train_kw})
    grid = replace(base, model=mc, train=tc,
                   blocks_short=int(rest.pop("blocks_short", base.blocks_short)),
                   blocks_long=int(rest.pop("blocks_long", base.blocks_long)))
    if grid.blocks_short < 1 or grid.blocks_long < grid.blocks_short:
        raise ConfigError("need 1 <= blocks_short <= blocks_long")
    return grid, rest
