"""Linguistic unit extraction from frame features.

Frames are clustered with K-Means, each frame is assigned its nearest center
("semantic token"), runs of identical tokens are collapsed into units whose
run lengths become the duration targets, and token ids are substituted with
the corresponding center embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import groupby
from typing import Sequence

import numpy as np


class DegenerateCorpusError(ValueError):
    """Raised when the corpus has fewer distinct frames than requested clusters."""


@dataclass(frozen=True)
class FrameFeatures:
    """Per-frame feature matrix standing in for self-supervised speech features."""

    data: np.ndarray  # [num_frames, feature_dim]
    frame_hop_ms: float = 10.0

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"features must be [frames, dim] with >= 1 frame, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("features contain non-finite entries")
        if self.frame_hop_ms <= 0:
            raise ValueError("frame_hop_ms must be positive")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Codebook:
    """Cluster centers from K-Means; rows are center embeddings."""

    centers: np.ndarray  # [k, feature_dim]
    inertia_history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 2:
            raise ValueError("codebook needs a [k >= 2, dim] center matrix")
        if not np.isfinite(self.centers).all():
            raise ValueError("codebook centers contain non-finite entries")
        if len(np.unique(self.centers, axis=0)) != self.centers.shape[0]:
            raise ValueError("codebook centers must be pairwise distinct")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class UnitSequence:
    """Deduplicated tokens with run-length durations and center embeddings."""

    unit_ids: np.ndarray   # [num_units] int
    durations: np.ndarray  # [num_units] int, frames per unit
    embeddings: np.ndarray  # [num_units, feature_dim]

    def __post_init__(self):
        if not (len(self.unit_ids) == len(self.durations) == len(self.embeddings)):
            raise ValueError("unit_ids, durations and embeddings must have equal length")
        if len(self.unit_ids) == 0:
            raise ValueError("unit sequence is empty")
        if (self.durations <= 0).any():
            raise ValueError("durations must be positive")
        if (self.unit_ids[1:] == self.unit_ids[:-1]).any():
            raise ValueError("adjacent unit ids must differ")

    @property
    def num_units(self) -> int:
        return len(self.unit_ids)

    @property
    def num_frames(self) -> int:
        return int(self.durations.sum())


def _pairwise_sq_dists(x: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact squared Euclidean distances, chunked to bound memory.

    Computed from explicit differences (not the expanded dot-product form) so
    that exact ties stay exact and argmin tie-breaking is well defined.
    """
    out = np.empty((x.shape[0], centers.shape[0]), dtype=np.float64)
    for start in range(0, x.shape[0], chunk):
        block = x[start:start + chunk]
        diff = block[:, None, :] - centers[None, :, :]
        out[start:start + chunk] = np.einsum("ncd,ncd->nc", diff, diff)
    return out


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(x.shape[0])]
    min_d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = min_d2.sum()
        if total <= 0:
            # all remaining mass sits on already-chosen points; pick any new distinct row
            raise DegenerateCorpusError("could not seed k distinct centers")
        probs = min_d2 / total
        centers[j] = x[rng.choice(x.shape[0], p=probs)]
        d2 = ((x - centers[j]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return centers


def _lloyd(
    x: np.ndarray, init_centers: np.ndarray, max_iterations: int
) -> tuple[np.ndarray, float, list[float]]:
    centers = init_centers.copy()
    k = centers.shape[0]
    labels = np.full(x.shape[0], -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iterations):
        # fast dot-product form is fine here: ties during fitting carry no contract
        d2 = (x ** 2).sum(axis=1)[:, None] - 2.0 * x @ centers.T + (centers ** 2).sum(axis=1)[None, :]
        new_labels = d2.argmin(axis=1)
        inertia = float(np.take_along_axis(d2, new_labels[:, None], axis=1).sum())
        history.append(inertia)

        counts = np.bincount(new_labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster from the farthest point of the largest cluster
            largest = int(counts.argmax())
            members = np.flatnonzero(new_labels == largest)
            far = members[d2[members, largest].argmax()]
            centers[j] = x[far]
            new_labels[far] = j
            counts[largest] -= 1
            counts[j] += 1

        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        centers = sums / counts[:, None]
    return centers, history[-1], history


def fit_kmeans(
    corpus: Sequence[FrameFeatures],
    k: int,
    seed: int,
    *,
    max_iterations: int = 100,
    n_init: int = 4,
) -> Codebook:
    """Fit K-Means over all frames of the corpus (Lloyd's algorithm).

    Runs ``n_init`` k-means++ restarts and keeps the lowest-inertia solution.
    Deterministic for a fixed seed. Empty clusters are re-seeded from the
    farthest point of the largest cluster.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if not corpus:
        raise ValueError("corpus is empty")
    dims = {f.feature_dim for f in corpus}
    if len(dims) != 1:
        raise ValueError(f"corpus has mixed feature dims: {sorted(dims)}")
    x = np.concatenate([f.data for f in corpus]).astype(np.float64)
    if x.shape[0] < k:
        raise ValueError(f"total frame count {x.shape[0]} < k={k}")
    if len(np.unique(x, axis=0)) < k:
        raise DegenerateCorpusError(f"fewer than k={k} distinct frames in corpus")

    best: tuple[np.ndarray, float, list[float]] | None = None
    for restart in range(n_init):
        rng = np.random.default_rng(np.random.SeedSequence([seed, restart]))
        init = _kmeans_pp_init(x, k, rng)
        centers, inertia, history = _lloyd(x, init, max_iterations)
        if best is None or inertia < best[1]:
            best = (centers, inertia, history)
    assert best is not None
    return Codebook(centers=best[0], inertia_history=tuple(best[2]))


def assign(features: FrameFeatures, codebook: Codebook) -> np.ndarray:
    """Token per frame: index of the nearest center, ties broken by lowest index."""
    if features.feature_dim != codebook.feature_dim:
        raise ValueError(
            f"feature dim {features.feature_dim} != codebook dim {codebook.feature_dim}"
        )
    d2 = _pairwise_sq_dists(features.data.astype(np.float64), codebook.centers.astype(np.float64))
    return d2.argmin(axis=1).astype(np.int64)


def deduplicate(tokens: np.ndarray, codebook: Codebook) -> UnitSequence:
    """Collapse runs of identical tokens into units; run lengths become durations."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token sequence must be non-empty and 1-D")
    if tokens.min() < 0 or tokens.max() >= codebook.k:
        raise ValueError("token out of codebook range")
    ids, lengths = [], []
    for token, run in groupby(tokens):
        ids.append(int(token))
        lengths.append(sum(1 for _ in run))
    unit_ids = np.array(ids, dtype=np.int64)
    return UnitSequence(
        unit_ids=unit_ids,
        durations=np.array(lengths, dtype=np.int64),
        embeddings=codebook.centers[unit_ids],
    )


def expand(units: UnitSequence) -> np.ndarray:
    """Inverse of deduplicate: repeat each unit id by its duration."""
    return np.repeat(units.unit_ids, units.durations)
