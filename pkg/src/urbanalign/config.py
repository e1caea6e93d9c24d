"""Training configuration and flat key=value config file parsing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .alignment import FUSION_MODES
from .errors import UsageError

# Hyperparameter grids exposed for sweep tooling.
LR_GRID = (2e-6, 2e-5, 2e-4, 2e-3, 2e-2)
BATCH_GRID = (4, 8, 16, 32, 64)


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 2e-4
    batch_size: int = 8
    alpha: float = 0.5
    beta: float = 0.5
    tau: float = 0.07
    learnable_tau: bool = False
    pretrain_epochs: int = 10
    probe_epochs: int = 100
    probe_lr: float = 1e-2
    probe_hidden: int = 32
    patience: int = 10
    sv_cap: int = 25
    local_batch_cap: int = 32
    fusion: str = "addition"
    augment: bool = False
    threads: int = 1
    # encoder shape
    patch: int = 8
    dim: int = 32
    enc_layers: int = 2
    heads: int = 4
    text_max_len: int = 32

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.probe_lr <= 0:
            raise UsageError("learning rates must be positive")
        if self.batch_size < 2:
            raise UsageError("batch_size must be at least 2 for contrastive training")
        if self.alpha < 0 or self.beta < 0:
            raise UsageError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise UsageError("temperature must be positive")
        if self.pretrain_epochs < 1 or self.probe_epochs < 1:
            raise UsageError("epoch counts must be at least 1")
        if self.patience < 1:
            raise UsageError("patience must be at least 1")
        if self.sv_cap < 0 or self.local_batch_cap < 0:
            raise UsageError("caps must be nonnegative")
        if self.fusion not in FUSION_MODES:
            raise UsageError(f"fusion must be one of {FUSION_MODES}")
        if self.threads < 1:
            raise UsageError("threads must be at least 1")
        if self.probe_hidden < 0:
            raise UsageError("probe_hidden must be nonnegative (0 = linear probe)")
        return self

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def _coerce(name: str, value: str, target_type) -> object:
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {name}: expected boolean, got {value!r}")
    try:
        return target_type(value)
    except ValueError:
        raise UsageError(
            f"config key {name}: expected {target_type.__name__}, got {value!r}"
        ) from None


def build_config(
    file_values: dict[str, str] | None = None, overrides: dict | None = None
) -> TrainConfig:
    """Defaults, overridden by config-file values, overridden by CLI flags."""
    import typing

    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    types = typing.get_type_hints(TrainConfig)
    kwargs: dict = {}
    for key, raw in (file_values or {}).items():
        if key not in fields:
            raise UsageError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, raw, types[key])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in fields:
            raise UsageError(f"unknown config override {key!r}")
        kwargs[key] = value
    return TrainConfig(**kwargs).validate()
