"""Run configuration: one validated key tree loaded from YAML.

Unknown keys are rejected at every level and basic range checks run at load
time, before any training starts. ``STYLEVC_DATA_ROOT`` overrides
``data.root``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datagen import DEFAULT_STYLES, GeneratorSettings, StyleSpec

DATA_ROOT_ENV = "STYLEVC_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


@dataclass
class DataConfig:
    root: str = "data"
    num_utterances: int = 2000
    holdout_utterances: int = 50
    num_prototypes: int = 64
    feature_dim: int = 16
    num_bins: int = 64
    frame_hop_ms: float = 10.0
    f0_min_hz: float = 50.0
    bin_hz: float = 10.0
    pitch_search_bins: int = 32
    content_band_start: int = 36
    min_phonemes: int = 9
    max_phonemes: int = 13
    min_phone_frames: int = 4
    max_phone_frames: int = 7
    feature_noise: float = 0.01
    mel_noise: float = 0.01
    styles: list[StyleSpec] = field(default_factory=lambda: list(DEFAULT_STYLES))

    def generator_settings(self) -> GeneratorSettings:
        return GeneratorSettings(
            num_prototypes=self.num_prototypes,
            feature_dim=self.feature_dim,
            num_bins=self.num_bins,
            frame_hop_ms=self.frame_hop_ms,
            f0_min_hz=self.f0_min_hz,
            bin_hz=self.bin_hz,
            content_band_start=self.content_band_start,
            min_phonemes=self.min_phonemes,
            max_phonemes=self.max_phonemes,
            min_phone_frames=self.min_phone_frames,
            max_phone_frames=self.max_phone_frames,
            feature_noise=self.feature_noise,
            mel_noise=self.mel_noise,
        )


@dataclass
class UnitsConfig:
    k: int = 64
    n_init: int = 4
    max_iterations: int = 50


@dataclass
class ModelConfig:
    model_dim: int = 64
    style_dim: int = 16
    prosody_dim: int = 4
    latent_dim: int = 8
    style_heads: int = 2
    content_blocks: int = 2
    content_heads: int = 2
    prosody_channels: int = 48
    prosody_blocks: int = 4
    prosody_kernel: int = 3
    duration_kernel: int = 3
    sigma_floor: float = 0.1
    posterior_channels: int = 64
    posterior_layers: int = 3
    decoder_channels: int = 64
    decoder_layers: int = 4


@dataclass
class TrainVCConfig:
    steps: int = 2500
    batch_size: int = 8
    learning_rate: float = 1e-3
    lambda_latent_kl: float = 1.0
    lambda_prosody: float = 1.0
    lambda_duration: float = 1.0
    grad_clip: float = 5.0
    checkpoint_every: int = 1000
    log_every: int = 50


@dataclass
class DiffusionConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    text_dim: int = 32
    hidden_dim: int = 128
    num_blocks: int = 3
    num_heads: int = 4
    train_steps: int = 4000
    batch_size: int = 64
    learning_rate: float = 1e-3
    sample_steps: int = 50
    sampler: str = "ddim"
    prompt_source: str = "vocab"
    prompt_embedding_path: str | None = None
    log_every: int = 100


@dataclass
class RunConfig:
    seed: int = 1234
    data: DataConfig = field(default_factory=DataConfig)
    units: UnitsConfig = field(default_factory=UnitsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_vc: TrainVCConfig = field(default_factory=TrainVCConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def data_root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV, self.data.root))


_SCALAR_COERCIONS = {
    int: (int,),
    float: (int, float),
    str: (str,),
    bool: (bool,),
}

_NESTED_SECTIONS = {
    "data": DataConfig,
    "units": UnitsConfig,
    "model": ModelConfig,
    "train_vc": TrainVCConfig,
    "diffusion": DiffusionConfig,
}


def _build(cls, mapping: Any, where: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(mapping) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in mapping.items():
        f = known[name]
        here = f"{where}.{name}"
        if cls is RunConfig and name in _NESTED_SECTIONS:
            kwargs[name] = _build(_NESTED_SECTIONS[name], value, here)
        elif name == "styles":
            if not isinstance(value, list):
                raise ConfigError(f"{here}: expected a list of style mappings")
            kwargs[name] = [_build_style(v, f"{here}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[name] = _coerce_scalar(f, value, here)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build_style(value: Any, where: str) -> StyleSpec:
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a style mapping")
    known = {f.name for f in dataclasses.fields(StyleSpec)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"{where}: unknown key(s): {', '.join(sorted(unknown))}")
    missing = known - set(value)
    if missing:
        raise ConfigError(f"{where}: missing key(s): {', '.join(sorted(missing))}")
    try:
        return StyleSpec(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce_scalar(f: dataclasses.Field, value: Any, where: str):
    # dataclass field types arrive as strings under `from __future__ import annotations`
    type_name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if value is None and "None" in type_name:
        return None
    for py_type, accepted in _SCALAR_COERCIONS.items():
        if py_type.__name__ in type_name:
            if py_type is int and isinstance(value, bool):
                break
            if isinstance(value, accepted):
                return py_type(value)
            break
    raise ConfigError(f"{where}: expected {type_name}, got {type(value).__name__} ({value!r})")


_RANGE_CHECKS = [
    ("data.num_utterances", lambda c: c.data.num_utterances >= 1),
    ("data.holdout_utterances", lambda c: 0 <= c.data.holdout_utterances < c.data.num_utterances),
    ("data.feature_dim", lambda c: c.data.feature_dim >= 1),
    ("data.num_bins", lambda c: c.data.num_bins >= 4),
    ("data.pitch_search_bins", lambda c: 1 <= c.data.pitch_search_bins <= c.data.num_bins),
    ("data.content_band_start", lambda c: 0 < c.data.content_band_start < c.data.num_bins),
    ("data.styles", lambda c: len(c.data.styles) >= 2),
    ("units.k", lambda c: c.units.k >= 2),
    ("model.model_dim", lambda c: c.model.model_dim % c.model.style_heads == 0),
    ("model.model_dim/content_heads", lambda c: c.model.model_dim % c.model.content_heads == 0),
    ("train_vc.steps", lambda c: c.train_vc.steps >= 1),
    ("train_vc.batch_size", lambda c: c.train_vc.batch_size >= 1),
    ("diffusion.num_steps", lambda c: c.diffusion.num_steps >= 2),
    ("diffusion.betas", lambda c: 0.0 < c.diffusion.beta_start <= c.diffusion.beta_end < 1.0),
    ("diffusion.sampler", lambda c: c.diffusion.sampler in ("ddpm", "ddim")),
    ("diffusion.prompt_source", lambda c: c.diffusion.prompt_source in ("vocab", "file")),
    ("diffusion.hidden_dim", lambda c: c.diffusion.hidden_dim % c.diffusion.num_heads == 0),
]


def validate(config: RunConfig) -> RunConfig:
    for label, check in _RANGE_CHECKS:
        try:
            ok = check(config)
        except Exception as exc:  # pragma: no cover - defensive
            raise ConfigError(f"{label}: {exc}") from exc
        if not ok:
            raise ConfigError(f"{label}: value out of range or inconsistent")
    if config.diffusion.prompt_source == "file" and not config.diffusion.prompt_embedding_path:
        raise ConfigError("diffusion.prompt_embedding_path required when prompt_source is 'file'")
    return config


def from_dict(mapping: dict) -> RunConfig:
    return validate(_build(RunConfig, mapping, "config"))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    return from_dict(raw)


def default_config() -> RunConfig:
    return RunConfig()


def to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)
