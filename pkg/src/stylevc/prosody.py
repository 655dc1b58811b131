"""Phoneme-level prosody modeling.

A dilated-convolution encoder reads mel frames and is pooled to one vector
per unit using the deduplication lengths, so no frame-level detail survives
into the prosody latent. A position-wise predictor produces the matching
prior from content and style. Both ends parameterize diagonal Gaussians and
are tied together by a closed-form KL divergence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .style import StyleAdaptiveLayerNorm

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 5.0


@dataclass
class ProsodyDistribution:
    """Per-unit diagonal Gaussian parameters."""

    mu: torch.Tensor         # [num_units, prosody_dim]
    log_sigma: torch.Tensor  # [num_units, prosody_dim]

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mu.shape, generator=generator, dtype=self.mu.dtype)
        return self.mu + torch.exp(self.log_sigma) * eps


def clamp_log_sigma(log_sigma: torch.Tensor) -> torch.Tensor:
    return log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def diagonal_gaussian_kl(
    mu_q: torch.Tensor,
    log_sigma_q: torch.Tensor,
    mu_p: torch.Tensor,
    log_sigma_p: torch.Tensor,
) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over dims, averaged over rows."""
    if mu_q.shape != mu_p.shape or log_sigma_q.shape != log_sigma_p.shape:
        raise ValueError("distribution shapes do not match")
    var_ratio = torch.exp(2.0 * (log_sigma_q - log_sigma_p))
    kl = log_sigma_p - log_sigma_q + 0.5 * (var_ratio + (mu_q - mu_p) ** 2 * torch.exp(-2.0 * log_sigma_p)) - 0.5
    return kl.sum(dim=-1).mean()


def prosody_kl(posterior: ProsodyDistribution, prior: ProsodyDistribution) -> torch.Tensor:
    """Closed-form KL between posterior and prior prosody distributions."""
    return diagonal_gaussian_kl(posterior.mu, posterior.log_sigma, prior.mu, prior.log_sigma)


def segment_means(frame_features: torch.Tensor, durations: Sequence[int]) -> torch.Tensor:
    """Mean-pool frame features over consecutive duration spans."""
    durations = [int(d) for d in durations]
    if sum(durations) != frame_features.shape[0]:
        raise ValueError(
            f"durations sum to {sum(durations)} but mel has {frame_features.shape[0]} frames"
        )
    if any(d <= 0 for d in durations):
        raise ValueError("durations must be positive")
    chunks = torch.split(frame_features, durations, dim=0)
    return torch.stack([c.mean(dim=0) for c in chunks])


class GatedDilatedBlock(nn.Module):
    """Dilated conv with tanh/sigmoid gate, residual and skip outputs."""

    def __init__(self, channels: int, kernel_size: int, dilation: int):
        super().__init__()
        self.conv = nn.Conv1d(
            channels, 2 * channels, kernel_size, dilation=dilation, padding="same"
        )
        self.res_proj = nn.Conv1d(channels, channels, 1)
        self.skip_proj = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, b = self.conv(x).chunk(2, dim=1)
        gated = torch.tanh(a) * torch.sigmoid(b)
        return x + self.res_proj(gated), self.skip_proj(gated)


class ProsodyEncoder(nn.Module):
    """Posterior prosody branch: dilated conv stack pooled to unit level."""

    def __init__(
        self,
        num_bins: int,
        channels: int,
        prosody_dim: int,
        num_blocks: int = 4,
        kernel_size: int = 3,
        dilation_base: int = 2,
    ):
        super().__init__()
        if num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        self.in_proj = nn.Conv1d(num_bins, channels, 1)
        self.blocks = nn.ModuleList(
            GatedDilatedBlock(channels, kernel_size, dilation_base ** i)
            for i in range(num_blocks)
        )
        self.out_proj = nn.Conv1d(channels, channels, 1)
        self.head = nn.Linear(channels, 2 * prosody_dim)

    def frame_features(self, mel: torch.Tensor) -> torch.Tensor:
        """Frame-level representation before unit pooling; [T, channels]."""
        x = self.in_proj(mel.T[None])  # [1, C, T]
        skip_sum = torch.zeros_like(x)
        for block in self.blocks:
            x, skip = block(x)
            skip_sum = skip_sum + skip
        out = self.out_proj(torch.relu(skip_sum))
        return out[0].T

    def forward(self, mel: torch.Tensor, durations: Sequence[int]) -> ProsodyDistribution:
        """mel: [T, num_bins]; durations must sum to T."""
        pooled = segment_means(self.frame_features(mel), durations)
        mu, log_sigma = self.head(pooled).chunk(2, dim=-1)
        return ProsodyDistribution(mu=mu, log_sigma=clamp_log_sigma(log_sigma))


class ProsodyPredictor(nn.Module):
    """Prior prosody branch: position-wise map from content hidden + style.

    Strictly per-unit (no cross-unit mixing), so permuting the units permutes
    the predicted rows identically.
    """

    def __init__(self, model_dim: int, style_dim: int, prosody_dim: int):
        super().__init__()
        self.in_proj = nn.Linear(model_dim, model_dim)
        self.saln1 = StyleAdaptiveLayerNorm(model_dim, style_dim)
        self.mid_proj = nn.Linear(model_dim, model_dim)
        self.saln2 = StyleAdaptiveLayerNorm(model_dim, style_dim)
        self.head = nn.Linear(model_dim, 2 * prosody_dim)

    def forward(self, content_hidden: torch.Tensor, style: torch.Tensor) -> ProsodyDistribution:
        h = F.silu(self.saln1(self.in_proj(content_hidden), style))
        h = F.silu(self.saln2(self.mid_proj(h), style))
        mu, log_sigma = self.head(h).chunk(2, dim=-1)
        return ProsodyDistribution(mu=mu, log_sigma=clamp_log_sigma(log_sigma))
