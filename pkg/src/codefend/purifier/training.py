"""Supervised denoiser training: noised clean latents, adversarial-latent
conditioning, AdamW over the noise-predictor parameters only."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..core import AdvPair, PairManifest, Rng, manifest_digest
from ..errors import CodefendError, EmptySplit, NonFiniteLoss
from .checkpoint import PurifierCheckpoint
from .schedule import DiffusionSchedule, add_noise
from .surrogate import BlockPoolCodec, SurrogateNoisePredictor

DEFAULT_INSTRUCTION = "Remove the adversarial noise while preserving original image details"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 4
    epochs: int = 4000
    seed: int = 0
    instruction: str = DEFAULT_INSTRUCTION
    log_path: str | None = None


def _draw(batch_n: int, latent_shape: tuple, T: int, rng: Rng):
    gen = rng.generator()
    ts = gen.integers(0, T, size=batch_n)
    eps = gen.standard_normal((batch_n, *latent_shape)).astype(np.float32)
    return ts, eps


def diffusion_loss(
    batch: Sequence[AdvPair],
    predictor,
    codec,
    schedule: DiffusionSchedule,
    instruction: str,
    rng: Rng,
) -> float:
    """Mean squared error between drawn noise and the predictor output.

    Per item: t ~ Uniform{0..T-1} and eps ~ N(0, I), both from rng; the
    noised latent comes from the clean image, the conditioning latent from
    the adversarial image.
    """
    if len(batch) == 0:
        raise ValueError("diffusion_loss needs a non-empty batch")
    lat_shape = codec.latent_shape(batch[0].clean.shape)
    ts, eps = _draw(len(batch), lat_shape, schedule.T, rng)
    total = 0.0
    count = 0
    for i, pair in enumerate(batch):
        try:
            z0 = codec.encode(pair.clean)
            cond = codec.encode(pair.adv)
            z_t = add_noise(z0, int(ts[i]), eps[i], schedule)
            pred = predictor.predict(z_t, int(ts[i]), cond, instruction)
        except Exception as exc:
            exc.batch_index = i  # type: ignore[attr-defined]
            raise
        diff = eps[i] - np.asarray(pred, dtype=np.float32)
        total += float(np.sum(diff * diff))
        count += diff.size
    value = total / count
    if not np.isfinite(value):
        raise NonFiniteLoss(f"diffusion loss is not finite: {value}")
    return value


def _loss_torch(
    z0_b: torch.Tensor,
    cond_b: torch.Tensor,
    predictor: SurrogateNoisePredictor,
    schedule: DiffusionSchedule,
    instruction: str,
    rng: Rng,
) -> torch.Tensor:
    n = z0_b.shape[0]
    gen = rng.generator()
    ts = torch.from_numpy(gen.integers(0, schedule.T, size=n))
    eps = torch.from_numpy(gen.standard_normal(tuple(z0_b.shape)).astype(np.float32))
    ab = torch.from_numpy(schedule.alpha_bar[ts.numpy()].astype(np.float32))
    a = torch.sqrt(ab)[:, None, None, None]
    b = torch.sqrt(1.0 - ab)[:, None, None, None]
    z_t = a * z0_b + b * eps
    pred = predictor.forward_torch(z_t, ts, cond_b, instruction)
    return torch.mean((eps - pred) ** 2)


def train_purifier(
    manifest: PairManifest,
    codec: BlockPoolCodec,
    predictor: SurrogateNoisePredictor,
    cfg: TrainConfig,
) -> PurifierCheckpoint:
    """Fine-tune the noise predictor on the manifest's train split.

    Everything outside the predictor stays frozen; a per-epoch mean-loss
    log is written as CSV when cfg.log_path is set.
    """
    pairs = manifest.load_pairs("train")
    if not pairs:
        raise EmptySplit("manifest has no train entries")
    codec_before = codec.fingerprint()
    schedule = predictor.schedule

    def to_nchw(arr: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))

    z0_all = torch.stack([to_nchw(codec.encode(p.clean)) for p in pairs])
    cond_all = torch.stack([to_nchw(codec.encode(p.adv)) for p in pairs])

    opt = torch.optim.AdamW(predictor.trainable_params(), lr=cfg.learning_rate)
    predictor.module.train()
    history: list[tuple[int, float]] = []
    n = len(pairs)
    for epoch in range(cfg.epochs):
        order = Rng(cfg.seed).child(epoch).generator().permutation(n)
        epoch_losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            loss = _loss_torch(
                z0_all[idx],
                cond_all[idx],
                predictor,
                schedule,
                cfg.instruction,
                Rng(cfg.seed).child(epoch, step, 1),
            )
            value = float(loss.item())
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(value)
        history.append((epoch, float(np.mean(epoch_losses))))
    predictor.module.eval()

    if codec.fingerprint() != codec_before:
        raise CodefendError("codec changed during training; freeze contract violated")
    if cfg.log_path:
        log_path = Path(cfg.log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss"])
            for epoch, mean_loss in history:
                writer.writerow([epoch, f"{mean_loss:.8f}"])

    return PurifierCheckpoint(
        provider_name=predictor.name,
        provider_version=predictor.version,
        schedule=schedule,
        instruction=cfg.instruction,
        training_meta={
            "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
            "manifest_hash": manifest_digest(manifest),
        },
        params=predictor.param_arrays(),
    )
