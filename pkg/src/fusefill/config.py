"""Run configuration: one flat record covering model, training and evaluation.

Config files are flat ``key = value`` text. Presets are applied first, then
file keys, then command-line overrides.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def _f(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass
class Config:
    preset: str = _f("full", "architecture preset applied before other keys (full | desk)")

    # data
    image_size: int = _f(128, "square image resolution in pixels")
    channels: int = _f(3, "image channels (1 for grayscale glyph data)")
    split_ratio: float = _f(0.8, "fraction of categories assigned to the seen split")
    split_seed: int = _f(0, "seed for the seen/unseen category split")
    split_file: str = _f("", "optional split file listing seen/unseen categories")
    coefficient_law: str = _f("uniform_simplex", "law for interpolation coefficients")

    # generator
    gen_stem: int = _f(32, "generator input 1x1 conv width")
    gen_encoder: tuple = _f((64, 64, 96, 96, 128), "encoder block widths, shallow to deep")
    gen_decoder: tuple = _f((96, 96, 64, 64, 64), "decoder block widths, deep to shallow")
    skip_levels: tuple = _f((1, 2, 3), "skip connections carrying attention fusion")
    attention: str = _f("naf", "skip fusion: naf | local | none")
    leaky_slope: float = _f(0.2, "leaky ReLU negative slope")

    # discriminator
    disc_stem: int = _f(32, "discriminator input 1x1 conv width")
    disc_channels: tuple = _f((64, 128, 256, 512, 1024), "discriminator group widths")
    disc_blocks_per_group: int = _f(2, "ReLU-first residual blocks per group")
    spectral_norm: bool = _f(True, "spectral normalization on discriminator layers")
    regressor_hidden: int = _f(256, "hidden width of the coefficient regressor (0 = single linear layer)")

    # objective
    k_train: int = _f(3, "conditional images per training episode")
    lambda_rec: float = _f(1.0, "weight of the weighted reconstruction loss")
    lambda_ms: float = _f(0.01, "weight of the mode seeking loss")
    lambda_reg: float = _f(1.0, "weight of the interpolation regression loss")
    disable_l1: bool = _f(False, "ablate the weighted reconstruction loss")
    disable_lm: bool = _f(False, "ablate the mode seeking loss")
    disable_la: bool = _f(False, "ablate the interpolation regression loss")
    fake_uses_both_draws: bool = _f(True, "feed both coefficient draws to the fake hinge term")
    regressor_in_d: bool = _f(True, "train the coefficient regressor during the D half-step")

    # optimisation
    lr: float = _f(1e-4, "Adam learning rate (both players)")
    beta1: float = _f(0.5, "Adam beta1")
    beta2: float = _f(0.999, "Adam beta2")
    epochs: int = _f(200, "training epochs")
    steps_per_epoch: int = _f(0, "optimizer steps per epoch (0 = derived from seen images)")
    batch_episodes: int = _f(8, "episodes per optimizer step")
    checkpoint_every: int = _f(1, "write a checkpoint every N epochs")
    seed: int = _f(0, "global seed for weights and episode sampling")

    # evaluation
    k_gen: int = _f(3, "conditional images per generated sample at test time")
    fid_real_count: int = _f(30, "real images sampled per unseen category for metrics")
    fid_gen_count: int = _f(128, "generated images per unseen category for metrics")
    augment_count: int = _f(512, "generated or augmented images per category in classification")
    extractor_dim: int = _f(32, "embedding width of the evaluation feature extractor")
    extractor_epochs: int = _f(30, "training epochs of the evaluation feature extractor")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.k_train < 1 or self.k_gen < 1:
            raise ConfigError("K must be >= 1")
        if min(self.lambda_rec, self.lambda_ms, self.lambda_reg) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.attention not in ("naf", "local", "none"):
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        if self.coefficient_law != "uniform_simplex":
            raise ConfigError(f"unsupported coefficient_law {self.coefficient_law!r}")
        if len(self.gen_encoder) != len(self.gen_decoder):
            raise ConfigError("gen_encoder and gen_decoder need the same depth")
        n = len(self.gen_encoder)
        if self.image_size % (2 ** n) != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{n}")
        if self.image_size % (2 ** len(self.disc_channels)) != 0:
            raise ConfigError("image_size too small for the discriminator depth")
        for r in self.skip_levels:
            if not 1 <= r <= n - 1:
                raise ConfigError(f"skip level {r} outside 1..{n - 1}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")

    @property
    def skips(self) -> tuple:
        return () if self.attention == "none" else tuple(sorted(self.skip_levels))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {
        "image_size": 32,
        "channels": 1,
        "gen_stem": 8,
        "gen_encoder": (16, 16, 24, 24),
        "gen_decoder": (24, 24, 16, 16),
        "disc_stem": 8,
        "disc_channels": (16, 32, 64, 128),
        "disc_blocks_per_group": 1,
        "batch_episodes": 4,
        "epochs": 20,
        "steps_per_epoch": 100,
        "lr": 1e-3,
        "extractor_dim": 32,
    },
}

FIELD_TYPES = {f.name: f for f in fields(Config)}


def parse_value(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = FIELD_TYPES[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(t) for t in raw.replace(" ", "").split(",") if t)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(t) for t in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def read_kv_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> Config:
    """Resolve preset, then file keys, then overrides (already typed or raw str)."""
    merged: dict[str, Any] = {}
    for src in (file_values or {}, overrides or {}):
        for k, v in src.items():
            merged[k] = parse_value(k, v) if isinstance(v, str) else v
    preset = merged.get("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    values = dict(PRESETS[preset])
    values.update(merged)
    values["preset"] = preset
    return Config(**values)


def load_config(path=None, **overrides) -> Config:
    return build_config(read_kv_file(path) if path else {}, overrides)


def write_config(cfg: Config, path) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def desk_config(**overrides) -> Config:
    return build_config(overrides={"preset": "desk", **overrides})
