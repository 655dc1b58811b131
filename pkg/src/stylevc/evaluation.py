"""Objective metrics: DTW alignment, mel-cepstral distortion, pitch RMSE and
Pearson correlation, plus a pitch proxy for synthetic mel features."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.fft import dct
from scipy.spatial.distance import cdist

# dB scaling constant for cepstral distortion
_MCD_CONST = 10.0 / math.log(10.0)


def euclidean_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean cost matrix between two [T, D] sequences."""
    return cdist(a, b, metric="euclidean")


def _as_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def dtw_align(
    a: np.ndarray,
    b: np.ndarray,
    cost: Callable[[np.ndarray, np.ndarray], np.ndarray] = euclidean_cost,
) -> tuple[np.ndarray, float]:
    """Minimal-cost monotone alignment between two sequences.

    Local steps are (1,1), (1,0), (0,1); ties during backtracking prefer the
    diagonal, then advancing ``a``, then advancing ``b``. Returns the path as
    an [L, 2] array of (i, j) pairs from (0, 0) to (len(a)-1, len(b)-1), and
    the accumulated cost along it.
    """
    a, b = _as_2d(a), _as_2d(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("dtw_align requires non-empty sequences")
    c = np.asarray(cost(a, b), dtype=np.float64)
    n, m = c.shape
    acc = np.full((n, m), np.inf)
    # step codes: 0 = diagonal, 1 = from (i-1, j), 2 = from (i, j-1)
    steps = np.zeros((n, m), dtype=np.uint8)
    acc[0, 0] = c[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + c[0, j]
        steps[0, j] = 2
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + c[i, 0]
        steps[i, 0] = 1
        row_c = c[i]
        prev = acc[i - 1]
        cur = acc[i]
        for j in range(1, m):
            diag, up, left = prev[j - 1], prev[j], cur[j - 1]
            best = diag
            code = 0
            if up < best:
                best, code = up, 1
            if left < best:
                best, code = left, 2
            cur[j] = row_c[j] + best
            steps[i, j] = code
    path = []
    i, j = n - 1, m - 1
    while True:
        path.append((i, j))
        if i == 0 and j == 0:
            break
        code = steps[i, j]
        if code == 0:
            i, j = i - 1, j - 1
        elif code == 1:
            i -= 1
        else:
            j -= 1
    path.reverse()
    return np.array(path, dtype=np.int64), float(acc[n - 1, m - 1])


def mcd(mel_a, mel_b, *, use_dct: bool = False, exclude_c0: bool = True) -> float:
    """Mel-cepstral distortion in dB between two mel features.

    Frames are DTW-aligned on Euclidean cost first. At desk scale the mel bins
    act as the cepstral coefficients directly; set ``use_dct`` to convert each
    frame to cepstra (DCT-II, ortho) for real log-spectra. Coefficient 0 is
    excluded unless ``exclude_c0`` is False.
    """
    a = np.asarray(getattr(mel_a, "data", mel_a), dtype=np.float64)
    b = np.asarray(getattr(mel_b, "data", mel_b), dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"bin mismatch: {a.shape[1]} vs {b.shape[1]}")
    if use_dct:
        a = dct(a, type=2, norm="ortho", axis=1)
        b = dct(b, type=2, norm="ortho", axis=1)
    path, _ = dtw_align(a, b)
    lo = 1 if exclude_c0 else 0
    diff = a[path[:, 0], lo:] - b[path[:, 1], lo:]
    per_pair = _MCD_CONST * np.sqrt(2.0 * (diff ** 2).sum(axis=1))
    return float(per_pair.mean())


def pitch_metrics(f0_a: np.ndarray, f0_b: np.ndarray) -> tuple[float, float | None]:
    """DTW-aligned pitch RMSE (Hz) and Pearson correlation over voiced contours.

    Correlation is undefined when either aligned contour has zero variance;
    ``None`` is returned in that case.
    """
    f0_a = np.asarray(f0_a, dtype=np.float64).ravel()
    f0_b = np.asarray(f0_b, dtype=np.float64).ravel()
    if f0_a.size == 0 or f0_b.size == 0:
        raise ValueError("pitch_metrics requires non-empty voiced contours")
    path, _ = dtw_align(f0_a, f0_b)
    pa = f0_a[path[:, 0]]
    pb = f0_b[path[:, 1]]
    rmse = float(np.sqrt(((pa - pb) ** 2).mean()))
    if pa.std() == 0.0 or pb.std() == 0.0:
        return rmse, None
    corr = float(np.corrcoef(pa, pb)[0, 1])
    return rmse, corr


def pitch_proxy(
    mel,
    bin_hz: np.ndarray,
    *,
    num_search_bins: int | None = None,
    rel_floor: float = 0.25,
    voiced_floor: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame pitch estimate from the low-frequency energy centroid.

    ``bin_hz`` maps bin index to center frequency (the synthetic generator's
    table). Within the first ``num_search_bins`` bins, each frame's baseline
    (its minimum) is removed, energies below ``rel_floor`` of the frame peak
    are zeroed, and the centroid of the rest is read off in Hz. Frames whose
    peak stays below ``voiced_floor`` are marked unvoiced; an all-zero frame
    is always unvoiced.

    Returns (f0[T] in Hz with zeros at unvoiced frames, voiced[T] bool mask).
    """
    data = np.asarray(getattr(mel, "data", mel), dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("pitch_proxy requires a non-empty [frames, bins] mel")
    bin_hz = np.asarray(bin_hz, dtype=np.float64)
    band = data[:, : num_search_bins or data.shape[1]]
    hz = bin_hz[: band.shape[1]]
    band = band - band.min(axis=1, keepdims=True)
    peak = band.max(axis=1)
    voiced = peak > voiced_floor
    band = np.where(band >= rel_floor * np.maximum(peak, 1e-12)[:, None], band, 0.0)
    mass = band.sum(axis=1)
    f0 = np.zeros(data.shape[0])
    ok = mass > 0
    f0[ok] = (band[ok] * hz[None, :]).sum(axis=1) / mass[ok]
    f0[~voiced] = 0.0
    return f0, voiced
