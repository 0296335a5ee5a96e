"""Run configuration.

A dataclass with working defaults, loadable from a flat UTF-8 ``key = value``
file (comments with ``#``, blank lines allowed). Unknown keys are rejected
with the offending line number; types come from the dataclass fields.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .perception import DEFAULT_QUESTION_TEXTS, QuestionSet


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class TrainConfig:
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/default"
    cache_path: str = "answers.jsonl"
    # protocol
    epochs: int = 100
    batch_size: int = 8
    resize: int = 224
    max_iters: int | None = None
    checkpoint_interval: int = 1
    # objective
    alpha: float = 4.0
    beta: float = 1.0
    disable_hier_loss: bool = False
    disable_text_guidance: bool = False
    # optimizer
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # model
    base_channels: int = 32
    embed_dim: int = 512
    attn_dim: int = 64
    # perception
    backend: str = "stub"           # stub | http
    answer_model: str = "default"
    embed_model: str = "default"
    refresh_interval: int = 1       # epochs between fused-answer refreshes
    question1: str = DEFAULT_QUESTION_TEXTS[0]
    question2: str = DEFAULT_QUESTION_TEXTS[1]
    question3: str = DEFAULT_QUESTION_TEXTS[2]
    question4: str = DEFAULT_QUESTION_TEXTS[3]
    # misc
    seed: int = 0
    dtype: str = "float32"          # float32 | float64

    def questions(self) -> QuestionSet:
        return QuestionSet.from_texts((self.question1, self.question2, self.question3, self.question4))

    def validate(self) -> "TrainConfig":
        checks = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 2, "batch_size must be >= 2 (the semantic loss needs a batch)"),
            (self.resize >= 32, "resize must be >= 32"),
            (self.alpha >= 0 and self.beta >= 0, "loss weights must be >= 0"),
            (self.lr > 0, "lr must be positive"),
            (self.backend in ("stub", "http"), f"backend must be stub or http, not {self.backend!r}"),
            (self.dtype in ("float32", "float64"), f"dtype must be float32 or float64, not {self.dtype!r}"),
            (self.refresh_interval >= 1, "refresh_interval must be >= 1"),
            (self.checkpoint_interval >= 1, "checkpoint_interval must be >= 1"),
            (self.max_iters is None or self.max_iters >= 1, "max_iters must be >= 1 when set"),
            (min(self.base_channels, self.embed_dim, self.attn_dim) >= 1, "model sizes must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _convert(name: str, raw: str, line: int | None = None):
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "int | None":
            return None if raw.lower() in ("none", "") else int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "on", "1"):
                return True
            if raw.lower() in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}", line) from exc


def parse_config_file(path, base: TrainConfig | None = None) -> TrainConfig:
    """Strict parse: every key must be a TrainConfig field."""
    config = dataclasses.replace(base) if base else TrainConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        setattr(config, key, _convert(key, value, lineno))
    return config


def apply_overrides(config: TrainConfig, pairs) -> TrainConfig:
    """Apply ``key=value`` strings (CLI flag overrides) onto a config."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, value = (part.strip() for part in pair.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        setattr(config, key, _convert(key, value))
    return config
