"""Two-stage training: the conversion model first, then the latent diffusion
model over style vectors extracted by the frozen first stage."""

from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import config as config_mod
from .config import RunConfig
from .datagen import StyleSpec
from .diffusion import (
    FilePromptSource,
    NoisePredictor,
    PromptVocabEncoder,
    StyleStandardizer,
    build_vocab,
    denoise_loss,
    make_schedule,
)
from .featureio import DataError, read_jsonl, read_matrix, read_mel, write_matrix
from .model import VoiceConversionModel
from .units import Codebook, FrameFeatures, UnitSequence, assign, deduplicate, fit_kmeans

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CODEBOOK_FILENAME = "codebook.f32"
VC_CHECKPOINT = "vc.ckpt"
DIFFUSION_CHECKPOINT = "diffusion.ckpt"


class NumericError(RuntimeError):
    """Non-finite loss or parameter during training (CLI exit code 4)."""


def _tensor_manifest(state_dict: dict) -> dict[str, list[int]]:
    return {name: list(t.shape) for name, t in state_dict.items()}


def save_checkpoint(path: str | Path, payload: dict) -> None:
    payload = dict(payload)
    payload["format_version"] = CHECKPOINT_FORMAT_VERSION
    if "model_state" in payload:
        payload["tensor_manifest"] = _tensor_manifest(payload["model_state"])
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version!r}")
    return payload


@dataclasses.dataclass
class Utterance:
    """One manifest row, loaded and tokenized."""

    utt_id: str
    mel: torch.Tensor
    units: UnitSequence
    style_name: str
    prompt: str


def load_manifest_entries(manifest_path: str | Path) -> list[dict]:
    records = read_jsonl(manifest_path)
    required = {"id", "feature_path", "mel_path", "f0_path", "style", "prompt"}
    for record in records:
        missing = required - set(record)
        if missing:
            raise DataError(f"manifest record missing keys: {sorted(missing)}")
    return records


def load_corpus(
    manifest_path: str | Path, codebook: Codebook, limit: int | None = None
) -> list[Utterance]:
    root = Path(manifest_path).parent
    entries = load_manifest_entries(manifest_path)
    if limit is not None:
        entries = entries[:limit]
    corpus = []
    for rec in entries:
        features_data, hop = read_matrix(root / rec["feature_path"])
        mel = read_mel(root / rec["mel_path"])
        features = FrameFeatures(data=features_data, frame_hop_ms=hop if hop > 0 else 10.0)
        tokens = assign(features, codebook)
        units = deduplicate(tokens, codebook)
        corpus.append(
            Utterance(
                utt_id=rec["id"],
                mel=torch.from_numpy(np.ascontiguousarray(mel.data)),
                units=units,
                style_name=rec["style"],
                prompt=rec["prompt"],
            )
        )
    return corpus


def fit_codebook_from_manifest(manifest_path: str | Path, cfg: RunConfig) -> Codebook:
    root = Path(manifest_path).parent
    entries = load_manifest_entries(manifest_path)
    feats = []
    for rec in entries:
        data, hop = read_matrix(root / rec["feature_path"])
        feats.append(FrameFeatures(data=data, frame_hop_ms=hop if hop > 0 else 10.0))
    return fit_kmeans(
        feats,
        cfg.units.k,
        cfg.seed,
        max_iterations=cfg.units.max_iterations,
        n_init=cfg.units.n_init,
    )


def _check_finite(value: torch.Tensor, what: str, step: int) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NumericError(f"{what} became non-finite at step {step}")


def _batch_indices(seed: int, step: int, population: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A71, step]))
    return rng.choice(population, size=min(batch_size, population), replace=False)


def _write_metrics_line(fh, record: dict) -> None:
    import json

    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def train_vc(
    cfg: RunConfig,
    manifest_path: str | Path,
    work_dir: str | Path,
    *,
    resume_from: str | Path | None = None,
) -> Path:
    """Stage one: jointly optimize reconstruction, latent KL, prosody KL and
    duration losses. Returns the final checkpoint path."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(manifest_path)

    codebook_path = work_dir / CODEBOOK_FILENAME
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        centers, _ = read_matrix(codebook_path)
        codebook = Codebook(centers=centers.astype(np.float64))
        start_step = int(payload["step"])
    else:
        payload = None
        logger.info("fitting k-means codebook (k=%d)", cfg.units.k)
        codebook = fit_codebook_from_manifest(manifest_path, cfg)
        write_matrix(codebook_path, codebook.centers)
        start_step = 0

    train_limit = cfg.data.num_utterances - cfg.data.holdout_utterances
    corpus = load_corpus(manifest_path, codebook, limit=train_limit)
    if not corpus:
        raise DataError("no training utterances")
    num_bins = corpus[0].mel.shape[1]

    torch.manual_seed(cfg.seed)
    model = VoiceConversionModel(cfg.model, num_bins, cfg.data.feature_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train_vc.learning_rate)
    generator = torch.Generator().manual_seed(cfg.seed + 1)

    if payload is not None:
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        generator.set_state(payload["generator_state"])

    tv = cfg.train_vc
    metrics_path = work_dir / "vc_metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    final_path = work_dir / VC_CHECKPOINT
    with open(metrics_path, mode) as metrics:
        for step in range(start_step + 1, tv.steps + 1):
            idx = _batch_indices(cfg.seed, step, len(corpus), tv.batch_size)
            optimizer.zero_grad()
            sums = {"total": 0.0, "recon": 0.0, "latent_kl": 0.0, "prosody_kl": 0.0, "duration": 0.0}
            batch_total = None
            for i in idx:
                utt = corpus[int(i)]
                losses = model.training_losses(
                    utt.mel,
                    utt.units,
                    generator,
                    lambda_latent_kl=tv.lambda_latent_kl,
                    lambda_prosody=tv.lambda_prosody,
                    lambda_duration=tv.lambda_duration,
                )
                contrib = losses.total / len(idx)
                batch_total = contrib if batch_total is None else batch_total + contrib
                for key, value in losses.detached().items():
                    sums[key] += value / len(idx)
            _check_finite(batch_total, "training loss", step)
            batch_total.backward()
            if tv.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), tv.grad_clip)
            optimizer.step()
            record = {"step": step, **{k: round(v, 6) for k, v in sums.items()}}
            if step % tv.log_every == 0 or step == 1 or step == tv.steps:
                _write_metrics_line(metrics, record)
                logger.info("vc step %d: total=%.4f recon=%.4f", step, sums["total"], sums["recon"])
            if step % tv.checkpoint_every == 0 or step == tv.steps:
                save_checkpoint(
                    final_path,
                    {
                        "stage": "vc",
                        "step": step,
                        "config": config_mod.to_dict(cfg),
                        "num_bins": num_bins,
                        "model_state": model.state_dict(),
                        "optimizer_state": optimizer.state_dict(),
                        "generator_state": generator.get_state(),
                        "last_losses": sums,
                    },
                )
    return final_path


def build_vc_model(payload: dict) -> tuple[VoiceConversionModel, RunConfig]:
    cfg = config_mod.from_dict(payload["config"])
    model = VoiceConversionModel(cfg.model, payload["num_bins"], cfg.data.feature_dim)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg


@torch.no_grad()
def extract_style_vectors(model: VoiceConversionModel, corpus: list[Utterance]) -> torch.Tensor:
    """Frozen-model style vectors for every utterance; deterministic."""
    model.eval()
    return torch.stack([model.style_encoder(utt.mel) for utt in corpus])


def train_diffusion(
    cfg: RunConfig,
    manifest_path: str | Path,
    work_dir: str | Path,
) -> Path:
    """Stage two: freeze the conversion model, standardize its style vectors,
    and fit the prompt-conditioned noise predictor."""
    work_dir = Path(work_dir)
    manifest_path = Path(manifest_path)
    vc_payload = load_checkpoint(work_dir / VC_CHECKPOINT)
    vc_model, _ = build_vc_model(vc_payload)

    centers, _ = read_matrix(work_dir / CODEBOOK_FILENAME)
    codebook = Codebook(centers=centers.astype(np.float64))
    corpus = load_corpus(manifest_path, codebook)
    holdout = cfg.data.holdout_utterances
    train_corpus = corpus[: len(corpus) - holdout] if holdout else corpus
    eval_corpus = corpus[len(corpus) - holdout:] if holdout else corpus[-min(32, len(corpus)):]
    if not train_corpus:
        raise DataError("no diffusion training pairs")
    for utt in train_corpus:
        if not utt.prompt.strip():
            raise DataError(f"utterance {utt.utt_id} has no prompt annotation")

    dcfg = cfg.diffusion
    vectors = extract_style_vectors(vc_model, train_corpus)
    standardizer = StyleStandardizer.fit(vectors)
    x0 = standardizer.apply(vectors)
    eval_vectors = standardizer.apply(extract_style_vectors(vc_model, eval_corpus))

    torch.manual_seed(cfg.seed + 2)
    if dcfg.prompt_source == "file":
        source = FilePromptSource(dcfg.prompt_embedding_path)
        text_dim = source.text_dim
        token_cache = [source.encode(utt.utt_id) for utt in train_corpus]
        eval_tokens = [source.encode(utt.utt_id) for utt in eval_corpus]
        prompt_state = {"kind": "file", "path": str(dcfg.prompt_embedding_path)}
        prompt_module = None
    else:
        vocab = build_vocab([utt.prompt for utt in train_corpus])
        prompt_module = PromptVocabEncoder(vocab, dcfg.text_dim)
        text_dim = dcfg.text_dim
        token_cache = [prompt_module.token_ids(utt.prompt) for utt in train_corpus]
        eval_tokens = [prompt_module.token_ids(utt.prompt) for utt in eval_corpus]
        prompt_state = {"kind": "vocab", "vocab": vocab}

    style_dim = cfg.model.style_dim
    model = NoisePredictor(style_dim, text_dim, dcfg.hidden_dim, dcfg.num_blocks, dcfg.num_heads)
    params = list(model.parameters()) + (list(prompt_module.parameters()) if prompt_module else [])
    optimizer = torch.optim.Adam(params, lr=dcfg.learning_rate)
    schedule = make_schedule(dcfg.num_steps, dcfg.beta_start, dcfg.beta_end)
    generator = torch.Generator().manual_seed(cfg.seed + 3)

    def batch_loss(indices: np.ndarray, pool_x0: torch.Tensor, pool_tokens: list, gen) -> torch.Tensor:
        total = None
        for i in indices:
            i = int(i)
            t = int(torch.randint(0, dcfg.num_steps, (1,), generator=gen))
            eps = torch.randn((style_dim,), generator=gen)
            tokens = pool_tokens[i]
            embedded = prompt_module.embedding(tokens) if prompt_module else tokens
            loss = denoise_loss(model, pool_x0[i], embedded, t, eps, schedule)
            total = loss if total is None else total + loss
        return total / len(indices)

    metrics_path = work_dir / "diffusion_metrics.jsonl"
    final_path = work_dir / DIFFUSION_CHECKPOINT
    eval_gen_seed = cfg.seed + 4
    with open(metrics_path, "w") as metrics:
        for step in range(1, dcfg.train_steps + 1):
            idx = _batch_indices(cfg.seed + 5, step, len(train_corpus), dcfg.batch_size)
            optimizer.zero_grad()
            loss = batch_loss(idx, x0, token_cache, generator)
            _check_finite(loss, "diffusion loss", step)
            loss.backward()
            optimizer.step()
            if step % dcfg.log_every == 0 or step == 1 or step == dcfg.train_steps:
                with torch.no_grad():
                    eval_gen = torch.Generator().manual_seed(eval_gen_seed)
                    eval_idx = np.arange(len(eval_corpus))
                    eval_loss = float(batch_loss(eval_idx, eval_vectors, eval_tokens, eval_gen))
                _write_metrics_line(
                    metrics,
                    {"step": step, "train_loss": round(float(loss), 6), "eval_loss": round(eval_loss, 6)},
                )
                logger.info("diffusion step %d: train=%.4f eval=%.4f", step, float(loss), eval_loss)

    save_checkpoint(
        final_path,
        {
            "stage": "diffusion",
            "step": dcfg.train_steps,
            "config": config_mod.to_dict(cfg),
            "model_state": model.state_dict(),
            "prompt": prompt_state,
            "prompt_state": prompt_module.state_dict() if prompt_module else None,
            "standardizer_mean": standardizer.mean,
            "standardizer_std": standardizer.std,
        },
    )
    return final_path
