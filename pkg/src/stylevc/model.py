"""Assembled voice-conversion model.

Training reconstructs each mel from its own posterior latent while the
content/prosody/duration branch supplies the frame-level prior; inference
swaps in the prior sample and predicted durations, so prompt mode and
reference mode share everything past the style vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .duration import DurationPredictor, duration_loss, gaussian_upsample
from .prosody import ProsodyEncoder, ProsodyPredictor, prosody_kl
from .style import StyleEncoder
from .synthesis import ContentEncoder, Decoder, FramePrior, PosteriorEncoder, elbo_losses
from .units import UnitSequence


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon: torch.Tensor
    latent_kl: torch.Tensor
    prosody: torch.Tensor
    duration: torch.Tensor

    def detached(self) -> dict[str, float]:
        return {
            "total": float(self.total),
            "recon": float(self.recon),
            "latent_kl": float(self.latent_kl),
            "prosody_kl": float(self.prosody),
            "duration": float(self.duration),
        }


class VoiceConversionModel(nn.Module):
    def __init__(self, cfg: ModelConfig, num_bins: int, feature_dim: int):
        super().__init__()
        self.cfg = cfg
        self.num_bins = num_bins
        self.style_encoder = StyleEncoder(num_bins, cfg.model_dim, cfg.style_dim, cfg.style_heads)
        self.content_encoder = ContentEncoder(feature_dim, cfg.model_dim, cfg.content_blocks, cfg.content_heads)
        self.posterior_encoder = PosteriorEncoder(num_bins, cfg.posterior_channels, cfg.latent_dim, cfg.posterior_layers)
        self.prosody_encoder = ProsodyEncoder(num_bins, cfg.prosody_channels, cfg.prosody_dim, cfg.prosody_blocks, cfg.prosody_kernel)
        self.prosody_predictor = ProsodyPredictor(cfg.model_dim, cfg.style_dim, cfg.prosody_dim)
        self.prosody_proj = nn.Linear(cfg.prosody_dim, cfg.model_dim)
        self.duration_predictor = DurationPredictor(cfg.model_dim, cfg.style_dim, cfg.duration_kernel, cfg.sigma_floor)
        self.frame_prior = FramePrior(cfg.model_dim, cfg.prosody_dim, cfg.style_dim, cfg.latent_dim)
        self.decoder = Decoder(cfg.latent_dim, cfg.decoder_channels, num_bins, cfg.style_dim, cfg.decoder_layers)

    def training_losses(
        self,
        mel: torch.Tensor,
        units: UnitSequence,
        generator: torch.Generator | None = None,
        *,
        lambda_latent_kl: float = 1.0,
        lambda_prosody: float = 1.0,
        lambda_duration: float = 1.0,
    ) -> LossBreakdown:
        """ELBO + prosody + duration losses for one utterance (teacher-forced durations)."""
        durations = [int(d) for d in units.durations]
        if sum(durations) != mel.shape[0]:
            raise ValueError("unit durations do not cover the mel frames")
        style = self.style_encoder(mel)
        embeddings = torch.as_tensor(units.embeddings, dtype=mel.dtype)
        content = self.content_encoder(embeddings)

        posterior = self.posterior_encoder(mel, generator)
        prosody_post = self.prosody_encoder(mel, durations)
        prosody_prior = self.prosody_predictor(content, style)
        z_prosody = prosody_post.sample(generator)

        combined = content + self.prosody_proj(z_prosody)
        pred = self.duration_predictor(combined, style)
        true_durations = torch.as_tensor(durations, dtype=mel.dtype)
        frame_hidden, weights = gaussian_upsample(combined, true_durations, pred.sigma)
        prosody_frame = weights @ z_prosody
        prior = self.frame_prior(frame_hidden, prosody_frame, style, generator)

        mel_hat = self.decoder(posterior.sample, style)
        recon, latent_kl = elbo_losses(mel, mel_hat, posterior, prior)
        pro = prosody_kl(prosody_post, prosody_prior)
        dur = duration_loss(pred.log_durations, true_durations)
        total = recon + lambda_latent_kl * latent_kl + lambda_prosody * pro + lambda_duration * dur
        return LossBreakdown(total=total, recon=recon, latent_kl=latent_kl, prosody=pro, duration=dur)

    @torch.no_grad()
    def synthesize(
        self,
        units: UnitSequence,
        style: torch.Tensor,
        generator: torch.Generator | None = None,
        *,
        sample_prosody: bool = False,
    ) -> torch.Tensor:
        """Units + style vector -> mel data [frames, num_bins].

        Prosody uses the prior mean unless ``sample_prosody``; the frame
        latent is sampled from the prior; durations are the predictor's.
        """
        embeddings = torch.as_tensor(units.embeddings, dtype=torch.float32)
        content = self.content_encoder(embeddings)
        prosody_prior = self.prosody_predictor(content, style)
        z_prosody = prosody_prior.sample(generator) if sample_prosody else prosody_prior.mu
        combined = content + self.prosody_proj(z_prosody)
        pred = self.duration_predictor(combined, style)
        frame_hidden, weights = gaussian_upsample(combined, pred.durations, pred.sigma)
        prosody_frame = weights @ z_prosody
        prior = self.frame_prior(frame_hidden, prosody_frame, style, generator)
        return self.decoder(prior.sample, style)
