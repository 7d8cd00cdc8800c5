"""Run configuration with dotted keys (``model.C``) and a flat ``key = value`` file format.

Precedence: command-line overrides > config file > defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

SCHEDULES = ("constant", "cosine")
ABLATIONS = ("full", "local_query", "global_query", "no_gumbel_topk")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    C: int = 32
    L: int = 3
    N: int = 4
    heads: int = 4
    H_mlp: int = 64
    ffn_hidden: int = 64
    tau: float = 1.0
    attention: str = "dense"
    mask_features: str = "pixel"
    gate: str = "channel"
    gumbel_at_eval: bool = False
    seed: int = 0


@dataclass
class DataConfig:
    T: int = 6
    H: int = 16
    W: int = 16
    n_objects: int = 3
    motion_fraction: float = 0.5
    n_train: int = 500
    n_val: int = 50
    seed: int = 0


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 2000
    batch: int = 4
    grad_clip: float = 1.0
    schedule: str = "cosine"
    seed: int = 0


@dataclass
class LossConfig:
    dice: float = 5.0
    focal: float = 2.0
    giou: float = 2.0
    l1: float = 5.0
    slots: float = 1.0
    referent: float = 1.0
    mask_resolution: str = "feature"


@dataclass
class EvalConfig:
    tolerance: int = 1
    threshold: float = 0.5


@dataclass
class TrainConfig:
    log_every: int = 50
    val_every: int = 500
    checkpoint_every: int = 0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: str = "full"

    def validate(self) -> "Config":
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        m = self.model
        if m.C % m.heads:
            raise ConfigError(f"model.C={m.C} not divisible by model.heads={m.heads}")
        if m.C % 4:
            raise ConfigError("model.C must be divisible by 4 for the 2-D position encoding")
        if not 1 <= m.L <= 6:
            raise ConfigError(f"model.L must be in 1..6, got {m.L}")
        if m.tau <= 0:
            raise ConfigError("model.tau must be positive")
        if m.attention != "dense":
            raise ConfigError("only model.attention = dense is implemented")
        if m.gate not in ("scalar", "channel"):
            raise ConfigError("model.gate must be 'scalar' or 'channel'")
        if m.mask_features not in ("pixel", "patch"):
            raise ConfigError("model.mask_features must be 'pixel' or 'patch'")
        if self.loss.mask_resolution not in ("feature", "full"):
            raise ConfigError("loss.mask_resolution must be 'feature' or 'full'")
        if self.optim.schedule not in SCHEDULES:
            raise ConfigError(f"optim.schedule must be one of {SCHEDULES}")
        if self.loss.slots < 0 or self.loss.referent < 0:
            raise ConfigError("loss.slots and loss.referent must be >= 0")
        if self.data.n_objects < 2:
            raise ConfigError("data.n_objects must be >= 2")
        return self

    # -- dotted access ----------------------------------------------------
    def flat(self) -> Dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    out[f"{f.name}.{g.name}"] = getattr(value, g.name)
            else:
                out[f.name] = value
        return out

    def set(self, key: str, raw: Any) -> None:
        parts = key.split(".")
        target = self
        for part in parts[:-1]:
            if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(target, part)
        name = parts[-1]
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(type(getattr(target, name)), raw, key))

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(kind, raw, key):
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, kind):
            return raw
        raw = str(raw)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {kind.__name__})") from None


def parse_text(text: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, Any] | Iterable[tuple]] = None,
) -> Config:
    cfg = Config()
    if path is not None:
        for key, value in parse_text(Path(path).read_text()).items():
            cfg.set(key, value)
    if overrides:
        items = overrides.items() if isinstance(overrides, Mapping) else overrides
        for key, value in items:
            cfg.set(key, value)
    return cfg.validate()


def from_text(text: str) -> Config:
    cfg = Config()
    for key, value in parse_text(text).items():
        cfg.set(key, value)
    return cfg.validate()
