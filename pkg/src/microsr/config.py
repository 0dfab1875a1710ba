"""Flat run configuration, named presets and the ``key = value`` file format.

Every field has a default equal to the final full-scale setup.  A config
file holds one ``key = value`` pair per line; ``#`` starts a comment.
Precedence is: defaults < preset < config file < command-line flags.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .losses import LossWeights
from .models import DiscriminatorConfig, FeatureExtractorConfig, GeneratorConfig, VGG19_BLOCKS
from .trainer import TrainConfig, TrainSchedule


class ConfigError(ValueError):
    """Invalid or conflicting run configuration."""


@dataclass
class RunConfig:
    # data
    manifest: str = ""
    out_dir: str = "runs/default"
    patch_size: int = 64
    overlap: float = 0.5
    val_fraction: float = 0.1
    drop_last: bool = False
    # generator
    num_rrdb: int = 23
    base_channels: int = 64
    growth_channels: int = 32
    residual_scale: float = 0.2
    init_scale: float = 0.1
    # discriminator
    disc_channels: tuple[int, ...] = (64, 64, 128, 128, 256, 256, 512, 512)
    disc_dense_units: int = 1024
    # feature extractor
    extractor_blocks: tuple[tuple[int, int], ...] = VGG19_BLOCKS
    extractor_layer: str = "conv3_4"
    extractor_weights: Optional[str] = None
    # losses
    pixel_weight: float = 1e-2
    perceptual_weight: float = 1e-2
    adversarial_weight: float = 1.0
    pixel_norm: str = "l1"
    perceptual_norm: str = "l1"
    use_texture: bool = False
    phase1_only: bool = False
    # schedule
    phase1_epochs: int = 50
    phase2_epochs: int = 50
    lr_initial: float = 1e-4
    lr_decay_per_epoch: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 16
    seed: int = 0
    # inference
    tile: int = 256
    tile_overlap: int = 32

    def validate(self) -> None:
        """Raise ``ConfigError`` for conflicts, before any compute happens."""
        try:
            self.bundle()
            self.schedule()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.patch_size < 16:
            raise ConfigError("patch_size must be >= 16")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.tile_overlap >= self.tile:
            raise ConfigError(f"tile_overlap {self.tile_overlap} must be smaller than tile {self.tile}")

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(num_rrdb=self.num_rrdb, base_channels=self.base_channels,
                               growth_channels=self.growth_channels,
                               residual_scale=self.residual_scale, init_scale=self.init_scale)

    def bundle(self) -> TrainConfig:
        return TrainConfig(
            generator=self.generator(),
            discriminator=DiscriminatorConfig(input_size=2 * self.patch_size,
                                              channel_sequence=self.disc_channels,
                                              dense_units=self.disc_dense_units,
                                              init_scale=self.init_scale),
            extractor=FeatureExtractorConfig(blocks=self.extractor_blocks, truncation=self.extractor_layer,
                                             weight_source=self.extractor_weights, seed=1234 + self.seed),
            weights=LossWeights(pixel=self.pixel_weight, perceptual=self.perceptual_weight,
                                adversarial=self.adversarial_weight, pixel_norm=self.pixel_norm,
                                perceptual_norm=self.perceptual_norm,
                                use_texture_instead_of_perceptual=self.use_texture),
            patch_size=self.patch_size,
            overlap=self.overlap,
            val_fraction=self.val_fraction,
            drop_last=self.drop_last,
        )

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(phase1_epochs=self.phase1_epochs, phase2_epochs=self.phase2_epochs,
                             lr_initial=self.lr_initial, lr_decay_per_epoch=self.lr_decay_per_epoch,
                             beta1=self.beta1, beta2=self.beta2, batch_size=self.batch_size, seed=self.seed)


PRESETS: dict[str, dict] = {
    # l1 pixel + l1 perceptual + adversarial
    "final": {},
    # pre-training only, l2 pixel loss
    "pixel-l2": {"pixel_norm": "l2", "phase1_only": True},
    # full training with l2 for both pixel and perceptual terms
    "gan-l2": {"pixel_norm": "l2", "perceptual_norm": "l2"},
    # pixel + texture (Gram) loss, no adversarial term
    "texture": {"use_texture": True, "adversarial_weight": 0.0},
}

FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    kind = FIELD_TYPES[key]
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        try:
            value = ast.literal_eval(text)
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"{key}: cannot parse {text!r}") from exc
        if key == "extractor_blocks":
            return tuple(tuple(int(v) for v in b) for b in value)
        return tuple(int(v) for v in (value if isinstance(value, (tuple, list)) else (value,)))
    if "Optional" in str(kind):
        return None if text.lower() in ("", "none") else text
    try:
        if isinstance(default, str):
            return text
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from exc


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def read_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the file format; ``parse_config_text`` reads it back."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def build_config(preset: str = "final", file_values: Optional[dict] = None,
                 overrides: Optional[dict] = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    merged = dict(PRESETS[preset])
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = replace(RunConfig(), **{k: _coerce(k, v) for k, v in merged.items()})
    cfg.validate()
    return cfg
