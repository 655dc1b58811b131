"""File formats shared across the pipeline.

Matrices (features, mel, codebooks, f0 tracks, prompt embeddings) are stored
as raw little-endian float32, row-major, next to a plain-text sidecar
``<file>.meta`` holding ``num_frames``, ``feature_dim`` and ``frame_hop_ms``.
Manifests and reports are line-delimited JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(Exception):
    """Missing, malformed, or inconsistent data on disk (CLI exit code 3)."""


@dataclass(frozen=True)
class MelFeature:
    """Frame-by-bin energy matrix standing in for a mel-spectrogram."""

    data: np.ndarray  # [num_frames, num_bins] float
    hop_ms: float = 10.0

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"mel must be a [frames, bins] matrix, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("mel contains non-finite entries")
        if self.hop_ms <= 0:
            raise ValueError("hop_ms must be positive")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]


def write_matrix(path: str | Path, data: np.ndarray, frame_hop_ms: float = 0.0) -> None:
    """Write a 2-D array as raw float32 plus its sidecar descriptor."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D array, got ndim={data.ndim}")
    data.astype("<f4").tofile(path)
    sidecar = (
        f"num_frames {data.shape[0]}\n"
        f"feature_dim {data.shape[1]}\n"
        f"frame_hop_ms {frame_hop_ms}\n"
    )
    Path(str(path) + ".meta").write_text(sidecar)


def read_matrix(path: str | Path) -> tuple[np.ndarray, float]:
    """Read a raw float32 matrix; returns (data, frame_hop_ms)."""
    path = Path(path)
    meta_path = Path(str(path) + ".meta")
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    if not meta_path.exists():
        raise DataError(f"missing sidecar: {meta_path}")
    fields: dict[str, str] = {}
    for line in meta_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            key, value = line.split(None, 1)
        except ValueError:
            raise DataError(f"malformed sidecar line in {meta_path}: {line!r}") from None
        fields[key] = value
    try:
        num_frames = int(fields["num_frames"])
        feature_dim = int(fields["feature_dim"])
        hop = float(fields.get("frame_hop_ms", "0"))
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad sidecar {meta_path}: {exc}") from exc
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != num_frames * feature_dim:
        raise DataError(
            f"{path}: expected {num_frames}x{feature_dim} values, file holds {raw.size}"
        )
    return raw.reshape(num_frames, feature_dim), hop


def read_mel(path: str | Path) -> MelFeature:
    data, hop = read_matrix(path)
    try:
        return MelFeature(data=data, hop_ms=hop if hop > 0 else 10.0)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_mel(path: str | Path, mel: MelFeature) -> None:
    write_matrix(path, mel.data, frame_hop_ms=mel.hop_ms)


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON record") from exc
    return records
