"""Flat ``key<TAB>value`` run configuration with dotted keys.

Types come from the defaults table; unknown keys are rejected.  Serialising
a parsed file gives back the same bytes when the file lists keys in the
canonical order (the order of ``DEFAULTS``).
"""

from __future__ import annotations

import os
from pathlib import Path

from .encoder import EncoderConfig

DEFAULT_SEED = 42

_ENCODER_DEFAULTS = {"hidden": 64, "layers": 2, "heads": 4, "ffn": 128, "dropout": 0.1}

DEFAULTS = {
    "seed": DEFAULT_SEED,
    "paths.data": "data",
    "paths.checkpoints": "store",
    "paths.output": "out",
    "data.synthetic_n": 2000,
    "data.dup_rate": 0.01,
    "data.off_rate": 0.33,
    "data.vocab_size": 2000,
    "data.max_length": 128,
    "data.pt_holdout": 0.005,
    "data.stage2_fraction": 1.0,
    **{f"encoder.{v}.{k}": val for v in ("A", "B") for k, val in _ENCODER_DEFAULTS.items()},
    "train.epochs": 10,
    "train.gen_epochs": 10,
    "train.lr": 2e-5,
    "train.lr_scale": 1.0,
    "train.batch_size": 16,
    "train.mask_rate": 0.15,
    "train.from_scratch": False,
    "ensemble.epochs": 10,
    "ensemble.lr": 2e-5,
    "ensemble.dropout": 0.1,
    "ensemble.freeze_members": False,
}

# Desk scale: tiny models trained from scratch need a larger step than 2e-5,
# so nominal learning rates are multiplied by lr_scale.
SCALES = {
    "desk": {"train.lr_scale": 100.0, "train.epochs": 3, "train.gen_epochs": 2,
             "ensemble.epochs": 2},
    "smoke": {"data.synthetic_n": 400, "train.lr_scale": 100.0, "train.epochs": 2,
              "train.gen_epochs": 1, "ensemble.epochs": 2, "encoder.A.hidden": 32,
              "encoder.B.hidden": 32, "encoder.A.ffn": 64, "encoder.B.ffn": 64},
    "full": {},
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, text):
    kind = type(DEFAULTS[key])
    if not isinstance(text, str):
        if kind is float and isinstance(text, int) and not isinstance(text, bool):
            return float(text)
        if not isinstance(text, kind):
            raise TypeError(f"{key}: expected {kind.__name__}, got {text!r}")
        return text
    if kind is bool:
        if text not in ("true", "false"):
            raise ValueError(f"{key}: expected true/false, got {text!r}")
        return text == "true"
    return kind(text)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise KeyError(f"unknown config key {k!r}")
            self.values[k] = _coerce(k, v)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def replace(self, **dotted) -> RunConfig:
        return RunConfig({**self.values, **dotted})

    @classmethod
    def for_scale(cls, scale: str = "desk", seed: int | None = None) -> RunConfig:
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}")
        values = dict(SCALES[scale])
        values["seed"] = env_seed() if seed is None else seed
        return cls(values)

    def to_tsv(self) -> str:
        return "".join(f"{k}\t{_fmt(v)}\n" for k, v in self.values.items())

    @classmethod
    def from_tsv(cls, text: str) -> RunConfig:
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, val = line.partition("\t")
            if not sep:
                raise ValueError(f"config line {lineno}: expected key<TAB>value")
            if key not in DEFAULTS:
                raise KeyError(f"config line {lineno}: unknown key {key!r}")
            values[key] = val
        return cls(values)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8", newline="\n")

    def encoder_config(self, variant: str, vocab_size: int) -> EncoderConfig:
        p = f"encoder.{variant}."
        return EncoderConfig.for_variant(
            variant, hidden=self[p + "hidden"], layers=self[p + "layers"], heads=self[p + "heads"],
            ffn=self[p + "ffn"], dropout=self[p + "dropout"], vocab_size=vocab_size,
            max_positions=self["data.max_length"])


def env_seed() -> int:
    """Default seed, overridable through ``SE_SEED``."""
    raw = os.environ.get("SE_SEED")
    return DEFAULT_SEED if raw in (None, "") else int(raw)
