"""Latent diffusion over style vectors, conditioned on prompt embeddings.

Forward corruption follows the standard variance-preserving process; the
noise predictor is a residual MLP with sinusoidal timestep embeddings and
per-block cross-attention reading the prompt tokens. Reverse sampling offers
stochastic ancestral updates and a deterministic variant.

Step-index convention: a state at t >= 1 carries noise level alpha_bar[t];
t = 0 is the terminal clean state, so the final reverse step (from t = 1)
uses a previous level of exactly 1 and returns the model's clean estimate.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .featureio import DataError, read_matrix, write_matrix

logger = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption tables: beta, alpha = 1 - beta, alpha_bar = prod(alpha)."""

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def num_steps(self) -> int:
        return self.betas.shape[0]


@dataclass
class DiffusionState:
    """A (noisy) style vector batch at reverse-process step t."""

    x: torch.Tensor  # [num_samples, style_dim]
    t: int


def make_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with running-product alpha_bar."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas.float(), alphas=alphas.float(), alpha_bars=alpha_bars.float())


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Corrupt x0 to level t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if not 0 <= t < schedule.num_steps:
        raise ValueError(f"t={t} outside [0, {schedule.num_steps})")
    ab = schedule.alpha_bars[t].to(x0.dtype)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def _alpha_bar_prev(schedule: NoiseSchedule, t_prev: int, dtype) -> torch.Tensor:
    if t_prev == 0:
        return torch.tensor(1.0, dtype=dtype)
    return schedule.alpha_bars[t_prev].to(dtype)


def denoise_step(
    model: nn.Module,
    state: DiffusionState,
    prompt: torch.Tensor,
    schedule: NoiseSchedule,
    *,
    sampler: str = "ddpm",
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    t_prev: int | None = None,
) -> DiffusionState:
    """One reverse step from state.t down to t_prev (default t - 1).

    "ddpm" draws from the ancestral posterior; "ddim" is the deterministic
    update at eta = 0 (eta > 0 interpolates back toward ancestral noise).
    """
    t = state.t
    if t < 1:
        raise ValueError("cannot denoise below t=1; t=0 is the terminal state")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must lie in [0, {t})")
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler: {sampler!r}")

    x_t = state.x
    ab_t = schedule.alpha_bars[t].to(x_t.dtype)
    ab_prev = _alpha_bar_prev(schedule, t_prev, x_t.dtype)
    t_batch = torch.full((x_t.shape[0],), t, dtype=torch.long)
    eps_hat = model(x_t, prompt, t_batch)
    x0_pred = (x_t - torch.sqrt(1.0 - ab_t) * eps_hat) / torch.sqrt(ab_t)

    if sampler == "ddim":
        var = (eta ** 2) * (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
        var = torch.clamp(var, min=0.0)
        x_prev = torch.sqrt(ab_prev) * x0_pred + torch.sqrt(torch.clamp(1.0 - ab_prev - var, min=0.0)) * eps_hat
        if eta > 0.0:
            noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
            x_prev = x_prev + torch.sqrt(var) * noise
    else:
        alpha_eff = ab_t / ab_prev
        beta_eff = 1.0 - alpha_eff
        mean = (
            torch.sqrt(ab_prev) * beta_eff / (1.0 - ab_t) * x0_pred
            + torch.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t) * x_t
        )
        var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_eff
        noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
        x_prev = mean + torch.sqrt(torch.clamp(var, min=0.0)) * noise
    return DiffusionState(x=x_prev, t=t_prev)


def sampling_timesteps(num_steps: int, schedule: NoiseSchedule) -> list[int]:
    """Descending timesteps in [1, T-1] for a strided reverse pass."""
    total = schedule.num_steps
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if total == 1:
        raise ValueError("schedule with a single step has no reverse chain")
    grid = np.linspace(1, total - 1, min(num_steps, total - 1))
    ts = sorted(set(int(round(v)) for v in grid), reverse=True)
    return ts


def sample_style(
    model: nn.Module,
    prompt: torch.Tensor,
    schedule: NoiseSchedule,
    *,
    style_dim: int,
    num_samples: int = 1,
    num_steps: int | None = None,
    sampler: str = "ddim",
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    x_init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Run the full reverse chain from pure noise; returns [num_samples, style_dim]."""
    ts = sampling_timesteps(num_steps or schedule.num_steps, schedule)
    if x_init is None:
        x = torch.randn((num_samples, style_dim), generator=generator)
    else:
        x = x_init
    state = DiffusionState(x=x, t=ts[0])
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        state = DiffusionState(x=state.x, t=t)
        state = denoise_step(
            model, state, prompt, schedule,
            sampler=sampler, eta=eta, generator=generator, t_prev=t_prev,
        )
    return state.x


def denoise_loss(
    model: nn.Module,
    x0: torch.Tensor,
    prompt: torch.Tensor,
    t,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Noise-space mean squared error at step(s) t, averaged over dims (and batch)."""
    single = x0.ndim == 1
    if single:
        x0, eps = x0[None], eps[None]
    t_batch = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t_batch.numel() == 1 and x0.shape[0] > 1:
        t_batch = t_batch.expand(x0.shape[0])
    if t_batch.shape[0] != x0.shape[0]:
        raise ValueError("t batch size mismatch")
    if x0.shape != eps.shape:
        raise ValueError("x0/eps shape mismatch")
    if int(t_batch.min()) < 0 or int(t_batch.max()) >= schedule.num_steps:
        raise ValueError("t outside schedule range")
    ab = schedule.alpha_bars[t_batch].to(x0.dtype)[:, None]
    x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    eps_hat = model(x_t, prompt, t_batch)
    return ((eps_hat - eps) ** 2).mean()


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps; [batch, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class PromptCrossAttention(nn.Module):
    """Multi-head attention with a single query from the hidden state and
    keys/values from the prompt tokens."""

    def __init__(self, hidden_dim: int, text_dim: int, num_heads: int):
        super().__init__()
        if hidden_dim % num_heads != 0:
            raise ValueError(f"hidden_dim {hidden_dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.q_proj = nn.Linear(hidden_dim, hidden_dim)
        self.k_proj = nn.Linear(text_dim, hidden_dim)
        self.v_proj = nn.Linear(text_dim, hidden_dim)
        self.out_proj = nn.Linear(hidden_dim, hidden_dim)

    def forward(
        self,
        hidden: torch.Tensor,           # [batch, hidden_dim]
        tokens: torch.Tensor,           # [batch, num_tokens, text_dim]
        token_mask: torch.Tensor | None = None,  # [batch, num_tokens], True = valid
    ) -> torch.Tensor:
        b, n, _ = tokens.shape
        q = self.q_proj(hidden).view(b, self.num_heads, 1, self.head_dim)
        k = self.k_proj(tokens).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(tokens).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)  # [b, h, 1, n]
        if token_mask is not None:
            scores = scores.masked_fill(~token_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, -1)
        return self.out_proj(out)


class NoisePredictorBlock(nn.Module):
    def __init__(self, hidden_dim: int, text_dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.cross = PromptCrossAttention(hidden_dim, text_dim, num_heads)

    def forward(self, h, time_emb, tokens, token_mask):
        h = h + self.mlp(self.norm1(h) + time_emb)
        h = h + self.cross(self.norm2(h), tokens, token_mask)
        return h


class NoisePredictor(nn.Module):
    """Residual MLP over the noisy style vector with sinusoidal timestep
    embedding; each block cross-attends to the prompt tokens."""

    def __init__(
        self,
        style_dim: int,
        text_dim: int,
        hidden_dim: int = 128,
        num_blocks: int = 3,
        num_heads: int = 4,
    ):
        super().__init__()
        self.in_proj = nn.Linear(style_dim, hidden_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )
        self.hidden_dim = hidden_dim
        self.blocks = nn.ModuleList(
            NoisePredictorBlock(hidden_dim, text_dim, num_heads) for _ in range(num_blocks)
        )
        self.out_norm = nn.LayerNorm(hidden_dim)
        self.out_proj = nn.Linear(hidden_dim, style_dim)

    def forward(
        self,
        x_t: torch.Tensor,      # [batch, style_dim]
        tokens: torch.Tensor,   # [num_tokens, text_dim] or [batch, num_tokens, text_dim]
        t: torch.Tensor,        # [batch] long
        token_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if x_t.ndim != 2:
            raise ValueError("x_t must be [batch, style_dim]")
        if tokens.ndim == 2:
            tokens = tokens[None].expand(x_t.shape[0], -1, -1)
        time_emb = self.time_mlp(timestep_embedding(t, self.hidden_dim, dtype=x_t.dtype))
        h = self.in_proj(x_t)
        for block in self.blocks:
            h = block(h, time_emb, tokens, token_mask)
        return self.out_proj(self.out_norm(h))


def tokenize_prompt(text: str) -> list[str]:
    """Lowercased word tokens split on whitespace/punctuation."""
    return [tok for tok in re.split(r"[^0-9a-zA-Z']+", text.lower()) if tok]


class PromptVocabEncoder(nn.Module):
    """Trainable closed-vocabulary prompt embedder.

    Unknown tokens map to a reserved embedding (with a warning); the empty
    prompt is an error.
    """

    def __init__(self, vocab: list[str], text_dim: int):
        super().__init__()
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary contains duplicates")
        if UNK_TOKEN in vocab:
            raise ValueError(f"{UNK_TOKEN} is reserved")
        self.vocab = list(vocab)
        self.index = {tok: i + 1 for i, tok in enumerate(self.vocab)}  # 0 reserved for UNK
        self.embedding = nn.Embedding(len(self.vocab) + 1, text_dim)

    def token_ids(self, text: str) -> torch.Tensor:
        tokens = tokenize_prompt(text)
        if not tokens:
            raise ValueError("empty prompt")
        ids = []
        for tok in tokens:
            if tok not in self.index:
                logger.warning("prompt token %r outside vocabulary; using %s", tok, UNK_TOKEN)
            ids.append(self.index.get(tok, 0))
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, text: str) -> torch.Tensor:
        """Prompt text -> [num_tokens, text_dim]."""
        return self.embedding(self.token_ids(text))

    encode = forward


def build_vocab(prompts: list[str]) -> list[str]:
    """Sorted unique tokens over a prompt corpus."""
    seen: set[str] = set()
    for text in prompts:
        seen.update(tokenize_prompt(text))
    return sorted(seen)


class FilePromptSource:
    """Precomputed prompt embeddings: raw float matrix plus a sidecar mapping
    prompt id -> row range (``<file>.index`` lines: ``id start end``)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        matrix, _ = read_matrix(self.path)
        self.matrix = matrix
        index_path = Path(str(self.path) + ".index")
        if not index_path.exists():
            raise DataError(f"missing prompt index: {index_path}")
        self.ranges: dict[str, tuple[int, int]] = {}
        for line in index_path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"malformed prompt index line: {line!r}")
            pid, start, end = parts[0], int(parts[1]), int(parts[2])
            if not (0 <= start < end <= matrix.shape[0]):
                raise DataError(f"row range out of bounds for prompt {pid!r}")
            self.ranges[pid] = (start, end)

    @property
    def text_dim(self) -> int:
        return self.matrix.shape[1]

    def encode(self, prompt_id: str) -> torch.Tensor:
        if prompt_id not in self.ranges:
            raise DataError(f"unknown prompt id: {prompt_id!r}")
        start, end = self.ranges[prompt_id]
        return torch.from_numpy(self.matrix[start:end].copy())


def write_prompt_embeddings(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    """Persist {prompt_id: [num_tokens, text_dim]} in the raw+index format."""
    if not entries:
        raise ValueError("no prompt embeddings to write")
    rows, lines, cursor = [], [], 0
    for pid, mat in entries.items():
        mat = np.asarray(mat, dtype=np.float32)
        if mat.ndim != 2 or mat.shape[0] < 1:
            raise ValueError(f"prompt {pid!r}: need a [tokens, dim] matrix")
        rows.append(mat)
        lines.append(f"{pid} {cursor} {cursor + mat.shape[0]}")
        cursor += mat.shape[0]
    write_matrix(path, np.concatenate(rows, axis=0))
    Path(str(path) + ".index").write_text("\n".join(lines) + "\n")


@dataclass
class StyleStandardizer:
    """Zero-mean/unit-variance map over style vectors with stored statistics."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def fit(cls, vectors: torch.Tensor, eps: float = 1e-6) -> "StyleStandardizer":
        return cls(mean=vectors.mean(dim=0), std=vectors.std(dim=0, unbiased=False).clamp_min(eps))

    def apply(self, vectors: torch.Tensor) -> torch.Tensor:
        return (vectors - self.mean) / self.std

    def invert(self, vectors: torch.Tensor) -> torch.Tensor:
        return vectors * self.std + self.mean
