"""Global style extraction and style-adaptive layer normalization."""

from __future__ import annotations

import torch
from torch import nn


class StyleAdaptiveLayerNorm(nn.Module):
    """Layer normalization whose gain and bias are affine functions of a style vector.

    out[t] = g(style) * normalize(hidden[t]) + b(style), with per-position
    normalization to zero mean / unit variance across the model dimension.
    The affine map's bias is initialized to gain 1 / bias 0, so a zeroed
    weight reproduces plain layer normalization.
    """

    def __init__(self, model_dim: int, style_dim: int, eps: float = 1e-5):
        super().__init__()
        self.model_dim = model_dim
        self.eps = eps
        self.affine = nn.Linear(style_dim, 2 * model_dim)
        with torch.no_grad():
            self.affine.bias[:model_dim].fill_(1.0)
            self.affine.bias[model_dim:].zero_()

    def forward(self, hidden: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.model_dim:
            raise ValueError(f"hidden dim {hidden.shape[-1]} != model_dim {self.model_dim}")
        mean = hidden.mean(dim=-1, keepdim=True)
        var = hidden.var(dim=-1, unbiased=False, keepdim=True)
        normed = (hidden - mean) / torch.sqrt(var + self.eps)
        gain, bias = self.affine(style).chunk(2, dim=-1)
        return gain * normed + bias


class StyleEncoder(nn.Module):
    """Extracts a fixed-dimension style vector from a mel feature.

    Frame-wise spectral layers feed one multi-head self-attention block; the
    attention output is averaged over time and projected to the style space.
    """

    def __init__(self, num_bins: int, model_dim: int, style_dim: int, num_heads: int = 2):
        super().__init__()
        if model_dim % num_heads != 0:
            raise ValueError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        self.spectral = nn.Sequential(
            nn.Linear(num_bins, model_dim),
            nn.SiLU(),
            nn.Linear(model_dim, model_dim),
            nn.SiLU(),
        )
        self.norm = nn.LayerNorm(model_dim)
        self.attention = nn.MultiheadAttention(model_dim, num_heads, batch_first=True)
        self.out_proj = nn.Linear(model_dim, style_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """mel: [num_frames, num_bins] -> style vector [style_dim]."""
        if mel.ndim != 2 or mel.shape[0] < 1:
            raise ValueError(f"expected a non-empty [frames, bins] mel, got {tuple(mel.shape)}")
        h = self.spectral(mel)[None]  # [1, T, D]
        normed = self.norm(h)
        attended, _ = self.attention(normed, normed, normed, need_weights=False)
        h = h + attended
        pooled = h.mean(dim=1)  # temporal average
        return self.out_proj(pooled)[0]
