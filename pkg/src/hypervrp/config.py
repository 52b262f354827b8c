"""Run configuration: presets, ``key = value`` files, and precedence.

A run is configured in three layers, each overriding the one before:

1. a named preset (``desk`` for quick local runs, ``paper`` for the
   full-scale setup),
2. a flat configuration file of ``key = value`` lines (``#`` starts a
   comment),
3. individual command-line flags.

Every layer speaks the same flat key vocabulary; ``lambda`` names the
sparsity weight (stored as ``lam`` because of the Python keyword).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .encoder import CONSTRAINT_KINDS, VARIANTS, ModelConfig
from .errors import ParseError
from .training import TrainConfig

__all__ = [
    "CONFIG_KEYS",
    "PRESETS",
    "build_train_config",
    "parse_config_text",
    "preset_values",
    "read_config_file",
]


def _to_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"expected an integer, got {text!r}")


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"expected a number, got {text!r}")


def _to_constraints(text: str) -> tuple[str, ...]:
    kinds = tuple(part.strip() for part in text.split(",") if part.strip())
    for kind in kinds:
        if kind not in CONSTRAINT_KINDS:
            raise ValueError(
                f"unknown constraint {kind!r} (choose from "
                f"{', '.join(CONSTRAINT_KINDS)})")
    if not kinds:
        raise ValueError("expected at least one constraint kind")
    return kinds


def _to_variant(text: str) -> str:
    if text not in VARIANTS:
        raise ValueError(f"unknown variant {text!r} (choose from "
                         f"{', '.join(VARIANTS)})")
    return text


@dataclass(frozen=True)
class _Key:
    target: str                  # "model" or "train"
    attr: str                    # dataclass field name
    convert: Callable[[str], object]


CONFIG_KEYS: dict[str, _Key] = {
    # model architecture
    "hidden_dim": _Key("model", "hidden_dim", _to_int),
    "heads": _Key("model", "heads", _to_int),
    "delta": _Key("model", "delta", _to_float),
    "lambda": _Key("model", "lam", _to_float),
    "gamma": _Key("model", "gamma", _to_float),
    "constraints": _Key("model", "constraints", _to_constraints),
    "r_prox": _Key("model", "r_prox", _to_float),
    "clip": _Key("model", "clip", _to_float),
    "variant": _Key("model", "variant", _to_variant),
    # training run
    "epochs": _Key("train", "epochs", _to_int),
    "batches_per_epoch": _Key("train", "batches_per_epoch", _to_int),
    "batch_size": _Key("train", "batch_size", _to_int),
    "val_size": _Key("train", "val_size", _to_int),
    "customers": _Key("train", "customers", _to_int),
    "capacity": _Key("train", "capacity", _to_int),
    "lr0": _Key("train", "lr0", _to_float),
    "lr_decay": _Key("train", "lr_decay", _to_float),
    "swap_epsilon": _Key("train", "swap_epsilon", _to_float),
    "seed": _Key("train", "seed", _to_int),
}


PRESETS: dict[str, dict[str, object]] = {
    # small-budget run that finishes on a workstation
    "desk": {
        "hidden_dim": 128,
        "heads": 8,
        "epochs": 20,
        "batches_per_epoch": 156,
        "batch_size": 64,
        "val_size": 128,
        "customers": 20,
        "capacity": 30,
    },
    # the full-scale reference setup
    "paper": {
        "hidden_dim": 256,
        "heads": 8,
        "epochs": 200,
        "batches_per_epoch": 2000,
        "batch_size": 64,
        "val_size": 1280,
        "customers": 20,
        "capacity": 30,
        "lr0": 1e-4,
        "lr_decay": 0.96,
    },
}


def preset_values(name: str) -> dict[str, object]:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r} (choose from "
                         f"{', '.join(sorted(PRESETS))})")
    return dict(PRESETS[name])


def parse_config_text(text: str) -> dict[str, object]:
    """Parse ``key = value`` lines into typed values.

    Blank lines are skipped and ``#`` starts a comment.  Unknown keys,
    duplicate keys, and malformed values are reported with their line
    number.
    """
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", line=lineno)
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in CONFIG_KEYS:
            raise ParseError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line=lineno)
        if not val:
            raise ParseError(f"empty value for {key!r}", line=lineno)
        try:
            values[key] = CONFIG_KEYS[key].convert(val)
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {exc}", line=lineno)
    return values


def read_config_file(path: str | Path) -> dict[str, object]:
    return parse_config_text(Path(path).read_text())


def build_train_config(
        layers: Sequence[Mapping[str, object]]) -> TrainConfig:
    """Merge configuration layers (later wins) into a training config.

    Entries whose value is ``None`` are treated as "not provided" so a
    flag layer can be passed through unfiltered.  Semantic rejections
    (a head count that does not divide the width, say) surface as the
    dataclasses' ``ValueError``.
    """
    merged: dict[str, object] = {}
    for layer in layers:
        for key, value in layer.items():
            if key not in CONFIG_KEYS:
                raise ValueError(f"unknown configuration key {key!r}")
            if value is not None:
                merged[key] = value
    model_kwargs: dict[str, object] = {}
    train_kwargs: dict[str, object] = {}
    for key, value in merged.items():
        spec = CONFIG_KEYS[key]
        (model_kwargs if spec.target == "model" else train_kwargs)[
            spec.attr] = value
    return TrainConfig(model=ModelConfig(**model_kwargs), **train_kwargs)
