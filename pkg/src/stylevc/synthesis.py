"""Conditional-VAE core: posterior encoder over mel frames, content encoder
over linguistic units, frame-level prior, and a style-conditioned decoder
reconstructing mel features, with the ELBO loss terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .prosody import clamp_log_sigma, diagonal_gaussian_kl
from .style import StyleAdaptiveLayerNorm


@dataclass
class FrameLatent:
    """Frame-level diagonal Gaussian with a reparameterized sample."""

    mu: torch.Tensor         # [num_frames, latent_dim]
    log_sigma: torch.Tensor  # [num_frames, latent_dim]
    sample: torch.Tensor     # [num_frames, latent_dim]


def _reparameterize(
    mu: torch.Tensor, log_sigma: torch.Tensor, generator: torch.Generator | None
) -> torch.Tensor:
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(log_sigma) * eps


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard sinusoidal position table [length, dim]."""
    position = torch.arange(length, dtype=dtype)[:, None]
    half = torch.arange(0, dim, 2, dtype=dtype)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq[: dim // 2])
    return table


class PosteriorEncoder(nn.Module):
    """Non-causal conv stack mapping mel frames to frame-level latents."""

    def __init__(self, num_bins: int, channels: int, latent_dim: int, num_layers: int = 3, kernel_size: int = 5):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv1d(num_bins, channels, kernel_size, padding="same"), nn.SiLU()]
        for _ in range(num_layers - 1):
            layers += [nn.Conv1d(channels, channels, kernel_size, padding="same"), nn.SiLU()]
        self.stack = nn.Sequential(*layers)
        self.head = nn.Linear(channels, 2 * latent_dim)

    def forward(self, mel: torch.Tensor, generator: torch.Generator | None = None) -> FrameLatent:
        if mel.ndim != 2 or mel.shape[0] < 1:
            raise ValueError(f"expected non-empty [frames, bins] mel, got {tuple(mel.shape)}")
        h = self.stack(mel.T[None])[0].T
        mu, log_sigma = self.head(h).chunk(2, dim=-1)
        log_sigma = clamp_log_sigma(log_sigma)
        return FrameLatent(mu=mu, log_sigma=log_sigma, sample=_reparameterize(mu, log_sigma, generator))


class TransformerBlock(nn.Module):
    def __init__(self, model_dim: int, num_heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(model_dim)
        self.attention = nn.MultiheadAttention(model_dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(model_dim)
        self.ff = nn.Sequential(
            nn.Linear(model_dim, ff_mult * model_dim),
            nn.SiLU(),
            nn.Linear(ff_mult * model_dim, model_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        normed = self.norm1(x)
        attended, _ = self.attention(normed, normed, normed, need_weights=False)
        x = x + attended
        return x + self.ff(self.norm2(x))


class ContentEncoder(nn.Module):
    """Self-attention stack over unit (center) embeddings; length preserving."""

    def __init__(self, feature_dim: int, model_dim: int, num_blocks: int = 2, num_heads: int = 2):
        super().__init__()
        self.in_proj = nn.Linear(feature_dim, model_dim)
        self.blocks = nn.ModuleList(TransformerBlock(model_dim, num_heads) for _ in range(num_blocks))
        self.model_dim = model_dim

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """embeddings: [num_units, feature_dim] -> [num_units, model_dim]."""
        if embeddings.ndim != 2 or embeddings.shape[0] < 1:
            raise ValueError(f"expected non-empty [units, dim] embeddings, got {tuple(embeddings.shape)}")
        h = self.in_proj(embeddings)
        h = h + sinusoidal_positions(h.shape[0], self.model_dim, dtype=h.dtype)
        h = h[None]
        for block in self.blocks:
            h = block(h)
        return h[0]


class FramePrior(nn.Module):
    """Frame-level latent prior from upsampled hidden, prosody and style."""

    def __init__(self, model_dim: int, prosody_dim: int, style_dim: int, latent_dim: int):
        super().__init__()
        self.prosody_proj = nn.Linear(prosody_dim, model_dim)
        self.saln = StyleAdaptiveLayerNorm(model_dim, style_dim)
        self.mid = nn.Linear(model_dim, model_dim)
        self.head = nn.Linear(model_dim, 2 * latent_dim)

    def forward(
        self,
        frame_hidden: torch.Tensor,
        prosody_frame: torch.Tensor,
        style: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> FrameLatent:
        if frame_hidden.shape[0] != prosody_frame.shape[0]:
            raise ValueError("frame_hidden and prosody_frame must have equal frame counts")
        h = frame_hidden + self.prosody_proj(prosody_frame)
        h = F.silu(self.mid(self.saln(h, style)))
        mu, log_sigma = self.head(h).chunk(2, dim=-1)
        log_sigma = clamp_log_sigma(log_sigma)
        return FrameLatent(mu=mu, log_sigma=log_sigma, sample=_reparameterize(mu, log_sigma, generator))


class Decoder(nn.Module):
    """Conv decoder with style-adaptive normalization; frame count preserving."""

    def __init__(
        self,
        latent_dim: int,
        channels: int,
        num_bins: int,
        style_dim: int,
        num_layers: int = 4,
        kernel_size: int = 5,
    ):
        super().__init__()
        self.in_proj = nn.Conv1d(latent_dim, channels, 1)
        self.convs = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, padding="same") for _ in range(num_layers)
        )
        self.salns = nn.ModuleList(
            StyleAdaptiveLayerNorm(channels, style_dim) for _ in range(num_layers)
        )
        self.out_proj = nn.Linear(channels, num_bins)

    def forward(self, latent: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        """latent: [num_frames, latent_dim] -> mel data [num_frames, num_bins]."""
        if latent.ndim != 2 or latent.shape[0] < 1:
            raise ValueError(f"expected non-empty [frames, latent] input, got {tuple(latent.shape)}")
        h = self.in_proj(latent.T[None])[0].T
        for conv, saln in zip(self.convs, self.salns):
            h = h + F.silu(saln(conv(h.T[None])[0].T, style))
        return self.out_proj(h)


def elbo_losses(
    mel: torch.Tensor,
    mel_hat: torch.Tensor,
    posterior: FrameLatent,
    prior: FrameLatent,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(reconstruction, latent KL): L1 over mel entries and closed-form
    diagonal-Gaussian KL summed over latent dims, averaged over frames."""
    if mel.shape != mel_hat.shape:
        raise ValueError(f"mel shapes misaligned: {tuple(mel.shape)} vs {tuple(mel_hat.shape)}")
    recon = (mel - mel_hat).abs().mean()
    latent_kl = diagonal_gaussian_kl(posterior.mu, posterior.log_sigma, prior.mu, prior.log_sigma)
    return recon, latent_kl
