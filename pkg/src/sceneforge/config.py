"""Run configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .numerics import ConfigError

# learning rates tried in the original sweep
LR_SWEEP = (1e-1, 3e-4, 1e-4, 3e-5, 1e-5)
BATCH_SIZES = (8, 16, 32)


@dataclass
class ModelConfig:
    d2d: int = 0
    d3d: int = 0
    dtext: int = 0
    dregion: int = 0
    d_kg: int = 300
    n_frames: int = 12
    d_emb: int = 64
    refine_hidden: int = 0  # 0 -> d_emb
    n_layers: int = 2
    n_heads: int = 8
    ffn_dim: int = 0  # 0 -> 4 * d_emb
    region_layers: int = 2
    region_heads: int = 8
    gen_hidden: int = 0  # 0 -> d_emb
    match_dim: int = 0  # 0 -> d_emb
    keep_prob: float = 0.5
    init_std: float = 0.0  # 0 -> 1 / sqrt(d_emb)

    def resolved(self) -> ModelConfig:
        c = dataclasses.replace(self)
        c.refine_hidden = c.refine_hidden or c.d_emb
        c.ffn_dim = c.ffn_dim or 4 * c.d_emb
        c.gen_hidden = c.gen_hidden or c.d_emb
        c.match_dim = c.match_dim or c.d_emb
        c.init_std = c.init_std or self.d_emb**-0.5
        return c

    def validate(self) -> None:
        for name in ("d2d", "d3d", "dtext", "dregion", "d_kg", "n_frames", "d_emb"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_layers < 0 or self.region_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.d_emb % self.n_heads or self.d_emb % self.region_heads:
            raise ConfigError(f"d_emb {self.d_emb} must be divisible by the head counts")
        if self.init_std < 0:
            raise ConfigError("init_std must be nonnegative")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("keep_prob must lie in (0, 1]")


@dataclass
class LossWeights:
    beta_t: float = 1.0
    beta_nt: float = 1.0
    beta_distill: float = 1.0
    beta_level_1: float = 1.0
    beta_level_2: float = 1.0

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be nonnegative")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float64"
    deterministic: bool = False

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.max_epochs <= 0 or self.patience <= 0:
            raise ConfigError("max_epochs and patience must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        self.train.validate()
        self.weights.validate()

    def to_flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for part in (self.model, self.train, self.weights):
            out.update(dataclasses.asdict(part))
        return out

    @classmethod
    def from_flat(cls, values: dict[str, object]) -> RunConfig:
        cfg = cls()
        for key, raw in values.items():
            set_option(cfg, key, raw)
        cfg.validate()
        return cfg


ALIASES = {"beta_distill_1": "beta_level_1", "beta_distill_2": "beta_level_2"}


def set_option(cfg: RunConfig, key: str, raw) -> None:
    key = ALIASES.get(key, key)
    for part in (cfg.model, cfg.train, cfg.weights):
        fields = {f.name: f for f in dataclasses.fields(part)}
        if key in fields:
            setattr(part, key, _coerce(type(getattr(part, key)), raw, key))
            return
    raise ConfigError(f"unknown config key {key!r}")


def _coerce(kind, raw, key):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> RunConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return RunConfig.from_flat(values)


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_flat().items())


# named presets usable as ``--config NAME``
PRESETS = {
    "small": {"d_emb": 16, "n_heads": 2, "region_heads": 2, "n_layers": 1, "region_layers": 1, "ffn_dim": 32},
    "synthetic": {"d_emb": 64, "batch_size": 16, "lr": 3e-4},
}


def resolve_config(arg: str | None) -> RunConfig:
    if arg is None:
        return RunConfig()
    if arg in PRESETS and not os.path.exists(arg):
        return RunConfig.from_flat(dict(PRESETS[arg]))
    return load_config(arg)
