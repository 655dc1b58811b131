"""Duration prediction and differentiable Gaussian upsampling.

Deduplication lengths are the duration targets. A conv stack conditioned on
the style vector predicts per-unit log-durations plus a per-unit width, and
the upsampler expands unit-level hidden states to frame level through a
row-stochastic projection matrix that stays differentiable in the durations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .style import StyleAdaptiveLayerNorm


@dataclass
class DurationPrediction:
    log_durations: torch.Tensor  # [num_units]
    sigma: torch.Tensor          # [num_units], upsampling widths (>= floor)

    @property
    def durations(self) -> torch.Tensor:
        return torch.exp(self.log_durations)


class DurationPredictor(nn.Module):
    """Per-unit log-duration and upsampling width from hidden states + style.

    Convolutions use replicate padding so a constant input sequence yields
    identical predictions at every position.
    """

    def __init__(
        self,
        model_dim: int,
        style_dim: int,
        kernel_size: int = 3,
        sigma_floor: float = 0.1,
    ):
        super().__init__()
        self.sigma_floor = sigma_floor
        self.conv1 = nn.Conv1d(model_dim, model_dim, kernel_size, padding="same", padding_mode="replicate")
        self.saln1 = StyleAdaptiveLayerNorm(model_dim, style_dim)
        self.conv2 = nn.Conv1d(model_dim, model_dim, kernel_size, padding="same", padding_mode="replicate")
        self.saln2 = StyleAdaptiveLayerNorm(model_dim, style_dim)
        self.head = nn.Linear(model_dim, 2)

    def forward(self, hidden: torch.Tensor, style: torch.Tensor) -> DurationPrediction:
        """hidden: [num_units, model_dim] -> per-unit prediction."""
        if hidden.ndim != 2 or hidden.shape[0] < 1:
            raise ValueError(f"expected non-empty [units, dim] hidden, got {tuple(hidden.shape)}")
        h = hidden.T[None]  # [1, D, U]
        h = F.silu(self.saln1(self.conv1(h)[0].T, style))
        h = F.silu(self.saln2(self.conv2(h.T[None])[0].T, style))
        out = self.head(h)
        log_durations = out[:, 0]
        sigma = torch.nn.functional.softplus(out[:, 1]) + self.sigma_floor
        return DurationPrediction(log_durations=log_durations, sigma=sigma)


def frame_count(durations: torch.Tensor) -> int:
    """Output frame count: round half away from zero, at least 1."""
    total = float(durations.sum())
    return max(1, int(math.floor(total + 0.5)))


def gaussian_upsample(
    hidden: torch.Tensor,
    durations: torch.Tensor,
    sigma: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Expand [num_units, dim] hidden to frame level with Gaussian weights.

    Unit centers sit at cumsum(d) - d/2; frame t attends to units with
    softmax(-(t + 0.5 - c_i)^2 / (2 sigma_i^2)). Rows of the returned weight
    matrix sum to 1; the whole map is differentiable in hidden, durations and
    sigma (the frame count itself is the rounded duration sum).
    """
    if hidden.ndim != 2:
        raise ValueError("hidden must be [num_units, dim]")
    durations = durations.reshape(-1)
    sigma = sigma.reshape(-1)
    if durations.shape[0] != hidden.shape[0] or sigma.shape[0] != hidden.shape[0]:
        raise ValueError("durations/sigma length must equal number of units")
    if bool((durations <= 0).any()):
        raise ValueError("durations must be positive")
    if bool((sigma <= 0).any()):
        raise ValueError("sigma must be positive")
    num_frames = frame_count(durations.detach())
    centers = torch.cumsum(durations, dim=0) - durations / 2.0
    t = torch.arange(num_frames, dtype=hidden.dtype) + 0.5
    logits = -((t[:, None] - centers[None, :]) ** 2) / (2.0 * sigma[None, :] ** 2)
    weights = torch.softmax(logits, dim=1)
    return weights @ hidden, weights


def duration_loss(log_durations: torch.Tensor, target_durations) -> torch.Tensor:
    """Mean squared error between predicted and target log-durations."""
    target = torch.as_tensor(target_durations, dtype=log_durations.dtype)
    if target.reshape(-1).shape != log_durations.reshape(-1).shape:
        raise ValueError("prediction/target length mismatch")
    if bool((target <= 0).any()):
        raise ValueError("target durations must be positive")
    return ((log_durations.reshape(-1) - torch.log(target.reshape(-1))) ** 2).mean()
