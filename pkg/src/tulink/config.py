"""Run configuration: defaults, flat key=value files, and seed streams.

Precedence is command-line flags over config file over defaults. Unknown
keys in a config file are rejected. All randomness in a run derives from
the single ``seed`` through named sub-streams, so each pipeline stage is
reproducible on its own.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .mobility import time_window_vocab
from .model import ModelConfig
from .train import TrainConfig

ABLATIONS = {
    "tul-l": "disable_local",
    "tul-g": "disable_global",
    "tul-sa": "disable_self_attention",
    "tul-ea": "use_softmax_global",
    "tul-ts": "disable_time_state",
}


@dataclass
class RunConfig:
    dataset: str = ""
    output_dir: str = ""
    cell_size: float = 40.0          # meters
    tau: float = 21600.0             # sub-trajectory interval, seconds
    time_window: float = 7200.0      # time-of-day window, seconds
    motion_speed_eps: float = 0.1
    motion_turn_deg: float = 15.0
    embed_dim: int = 128
    gcn_layers: int = 2
    attn_layers: int = 3
    heads: int = 4
    lambda_l2: float = 5e-4
    dropout: float = 0.5
    learning_rate: float = 1e-3
    epochs_max: int = 80
    batch_size: int = 16
    patience: int = 10
    seed: int = 42
    ablation: str = ""
    binarize_adjacency: bool = False
    scale_full_d: bool = False
    early_stop_on_loss: bool = False

    def validate(self) -> None:
        if self.cell_size <= 0:
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        time_window_vocab(self.time_window)
        if self.ablation and self.ablation not in ABLATIONS:
            raise ConfigError(
                f"unknown ablation {self.ablation!r}; valid names: "
                + ", ".join(sorted(ABLATIONS))
            )
        self.model_config().validate()
        self.train_config().validate()

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(
            embed_dim=self.embed_dim,
            gcn_layers=self.gcn_layers,
            attn_layers=self.attn_layers,
            heads=self.heads,
            lambda_l2=self.lambda_l2,
            dropout_rate=self.dropout,
            time_vocab=time_window_vocab(self.time_window),
            binarize_adjacency=self.binarize_adjacency,
            scale_full_d=self.scale_full_d,
        )
        if self.ablation:
            setattr(cfg, ABLATIONS[self.ablation], True)
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs_max=self.epochs_max,
            batch_size=self.batch_size,
            patience=self.patience,
            seed=self.seed,
            early_stop_on_loss=self.early_stop_on_loss,
        )


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {key}={raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key}={raw!r}: {exc}") from None
    return raw


def load_config_file(path: str | Path) -> dict:
    """Parse a flat key=value file; '#' starts a comment, unknown keys fail."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def resolve_config(file_path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then config file, then explicit overrides."""
    cfg = RunConfig()
    if file_path:
        for key, value in load_config_file(file_path).items():
            setattr(cfg, key, value)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def seeded_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent, reproducible generator for one named randomness stream."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(stream.encode("utf-8"))])
    )
