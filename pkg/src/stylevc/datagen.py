"""Synthetic desk-scale corpus with known ground truth.

Each utterance is a random sequence of prototype "phonemes". The frame
features repeat the prototype vectors (plus slight noise) so clustering
recovers them; the mel carries a Gaussian pitch bump in the low bins, a
per-prototype content bump in the high bins, and a style-specific spectral
tilt; f0 follows a slow sine around the style's base. Durations are the
style's rate multiplier applied to content-drawn base lengths. Prompts come
from a small template grammar over pitch/rate adjective bands.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .featureio import write_jsonl, write_matrix

PITCH_BAND_SPLIT_HZ = 200.0
SLOW_RATE_MIN = 1.15
FAST_RATE_MAX = 0.87

LOW_WORDS = ("low", "deep")
HIGH_WORDS = ("high", "bright")
SLOW_WORDS = ("slow", "unhurried")
FAST_WORDS = ("fast", "quick")
NEUTRAL_RATE_WORDS = ("steady", "even")

PROMPT_TEMPLATES = (
    "a {pitch} {rate} voice",
    "{pitch} and {rate} speech",
    "speak in a {pitch} {rate} tone",
    "make it sound {pitch} and {rate}",
)


@dataclass(frozen=True)
class StyleSpec:
    """Generation-time style: pitch band, vibrato depth, duration multiplier, tilt."""

    name: str
    f0_base: float
    f0_range: float
    rate: float
    tilt: float

    def __post_init__(self):
        if self.f0_base <= 0:
            raise ValueError("f0_base must be positive")
        if not 0.5 <= self.rate <= 2.0:
            raise ValueError(f"rate must lie in [0.5, 2.0], got {self.rate}")
        if self.f0_range < 0:
            raise ValueError("f0_range must be nonnegative")


DEFAULT_STYLES = (
    StyleSpec("low_slow", f0_base=120.0, f0_range=12.0, rate=1.5, tilt=-0.4),
    StyleSpec("low_fast", f0_base=120.0, f0_range=12.0, rate=0.75, tilt=-0.15),
    StyleSpec("high_slow", f0_base=280.0, f0_range=18.0, rate=1.5, tilt=0.15),
    StyleSpec("high_fast", f0_base=280.0, f0_range=18.0, rate=0.75, tilt=0.4),
)


@dataclass(frozen=True)
class GeneratorSettings:
    num_prototypes: int = 64
    feature_dim: int = 16
    num_bins: int = 64
    frame_hop_ms: float = 10.0
    f0_min_hz: float = 50.0
    bin_hz: float = 10.0
    content_band_start: int = 36
    min_phonemes: int = 9
    max_phonemes: int = 13
    min_phone_frames: int = 4
    max_phone_frames: int = 7
    pitch_bump_amp: float = 1.0
    pitch_bump_width: float = 1.5
    content_bump_amp: float = 0.5
    tilt_amp: float = 0.3
    feature_noise: float = 0.01
    mel_noise: float = 0.01

    def bin_frequencies(self) -> np.ndarray:
        return self.f0_min_hz + self.bin_hz * np.arange(self.num_bins)


def prototype_bank(settings: GeneratorSettings, seed: int) -> np.ndarray:
    """Well-separated prototype vectors; the true cluster centers."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA2E]))
    return rng.normal(0.0, 1.0, size=(settings.num_prototypes, settings.feature_dim))


@dataclass(frozen=True)
class UtterancePlan:
    """Style-independent content draw for one utterance."""

    phoneme_ids: np.ndarray
    base_frames: np.ndarray
    f0_period: float
    f0_phase: float


def plan_utterance(rng: np.random.Generator, settings: GeneratorSettings) -> UtterancePlan:
    num_phonemes = int(rng.integers(settings.min_phonemes, settings.max_phonemes + 1))
    ids = np.empty(num_phonemes, dtype=np.int64)
    ids[0] = rng.integers(settings.num_prototypes)
    for i in range(1, num_phonemes):
        # no adjacent repeats, so dedup lengths equal the planned durations
        nxt = rng.integers(settings.num_prototypes - 1)
        ids[i] = nxt if nxt < ids[i - 1] else nxt + 1
    base = rng.integers(settings.min_phone_frames, settings.max_phone_frames + 1, size=num_phonemes)
    return UtterancePlan(
        phoneme_ids=ids,
        base_frames=base,
        f0_period=float(rng.uniform(40.0, 80.0)),
        f0_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def styled_durations(plan: UtterancePlan, style: StyleSpec) -> np.ndarray:
    scaled = np.floor(plan.base_frames * style.rate + 0.5).astype(np.int64)
    return np.maximum(scaled, 1)


def render_utterance(
    plan: UtterancePlan,
    style: StyleSpec,
    bank: np.ndarray,
    settings: GeneratorSettings,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (features [T, feature_dim], mel [T, num_bins], f0 [T])."""
    durations = styled_durations(plan, style)
    total = int(durations.sum())
    frame_ids = np.repeat(plan.phoneme_ids, durations)

    features = bank[frame_ids] + rng.normal(0.0, settings.feature_noise, size=(total, settings.feature_dim))

    t = np.arange(total)
    f0 = style.f0_base + style.f0_range * np.sin(2.0 * np.pi * t / plan.f0_period + plan.f0_phase)

    bins = np.arange(settings.num_bins, dtype=np.float64)
    pitch_bin = (f0 - settings.f0_min_hz) / settings.bin_hz
    mel = settings.pitch_bump_amp * np.exp(
        -((bins[None, :] - pitch_bin[:, None]) ** 2) / (2.0 * settings.pitch_bump_width ** 2)
    )

    content_span = settings.num_bins - settings.content_band_start
    content_bin = settings.content_band_start + (frame_ids * 7) % content_span
    mel += settings.content_bump_amp * np.exp(
        -((bins[None, :] - content_bin[:, None]) ** 2) / (2.0 * 1.0 ** 2)
    )

    mel += style.tilt * settings.tilt_amp * (bins[None, :] / (settings.num_bins - 1))
    mel += rng.normal(0.0, settings.mel_noise, size=mel.shape)
    return features.astype(np.float32), mel.astype(np.float32), f0.astype(np.float32)


def _pitch_words(style: StyleSpec) -> tuple[str, ...]:
    return HIGH_WORDS if style.f0_base >= PITCH_BAND_SPLIT_HZ else LOW_WORDS


def _rate_words(style: StyleSpec) -> tuple[str, ...]:
    if style.rate >= SLOW_RATE_MIN:
        return SLOW_WORDS
    if style.rate <= FAST_RATE_MAX:
        return FAST_WORDS
    return NEUTRAL_RATE_WORDS


def prompt_grammar(style: StyleSpec, rng: np.random.Generator) -> str:
    """Natural-language prompt with adjectives from the style's bands."""
    template = PROMPT_TEMPLATES[rng.integers(len(PROMPT_TEMPLATES))]
    pitch = _pitch_words(style)[rng.integers(len(_pitch_words(style)))]
    rate = _rate_words(style)[rng.integers(len(_rate_words(style)))]
    return template.format(pitch=pitch, rate=rate)


def generate_corpus(
    out_dir: str | Path,
    num_utterances: int,
    styles: tuple[StyleSpec, ...] | list[StyleSpec],
    seed: int,
    settings: GeneratorSettings = GeneratorSettings(),
) -> Path:
    """Write features/mel/f0 files plus a JSONL manifest; returns the manifest path.

    Fully deterministic per seed: every utterance draws from its own RNG
    stream derived from (seed, index), and styles rotate round-robin.
    """
    styles = tuple(styles)
    if len(styles) < 2:
        raise ValueError("need at least 2 styles")
    if num_utterances < 1:
        raise ValueError("num_utterances must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "utt").mkdir(parents=True, exist_ok=True)
    bank = prototype_bank(settings, seed)

    records = []
    for i in range(num_utterances):
        content_rng = np.random.default_rng(np.random.SeedSequence([seed, i, 0]))
        render_rng = np.random.default_rng(np.random.SeedSequence([seed, i, 1]))
        prompt_rng = np.random.default_rng(np.random.SeedSequence([seed, i, 2]))
        style = styles[i % len(styles)]
        plan = plan_utterance(content_rng, settings)
        features, mel, f0 = render_utterance(plan, style, bank, settings, render_rng)
        utt_id = f"utt{i:05d}"
        feature_path = f"utt/{utt_id}.feat.f32"
        mel_path = f"utt/{utt_id}.mel.f32"
        f0_path = f"utt/{utt_id}.f0.f32"
        write_matrix(out_dir / feature_path, features, frame_hop_ms=settings.frame_hop_ms)
        write_matrix(out_dir / mel_path, mel, frame_hop_ms=settings.frame_hop_ms)
        write_matrix(out_dir / f0_path, f0, frame_hop_ms=settings.frame_hop_ms)
        records.append(
            {
                "id": utt_id,
                "feature_path": feature_path,
                "mel_path": mel_path,
                "f0_path": f0_path,
                "style": style.name,
                "prompt": prompt_grammar(style, prompt_rng),
            }
        )

    manifest_path = out_dir / "manifest.jsonl"
    write_jsonl(manifest_path, records)
    write_jsonl(out_dir / "styles.jsonl", [asdict(s) for s in styles])
    return manifest_path
