"""Instruction-guided purification sampling: partial noising of the input
latent, then a deterministic DDIM-style reverse loop with dual guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ImageTensor, Rng, clip01
from ..errors import SamplerDiverged
from .checkpoint import PurifierCheckpoint
from .schedule import DiffusionSchedule, add_noise


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 10
    t_start: int | None = None  # None -> round(0.3 * T)
    image_guidance: float = 1.5
    text_guidance: float = 7.5
    seed: int = 0


def _timesteps(t_start: int, steps: int) -> list[int]:
    ts = np.unique(np.round(np.linspace(0, t_start, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def _guided_eps(predictor, z: np.ndarray, t: int, cond: np.ndarray, instruction: str, cfg: SamplerConfig) -> np.ndarray:
    zeros = np.zeros_like(cond)
    e_uncond = predictor.predict(z, t, zeros, "")
    e_image = predictor.predict(z, t, cond, "")
    e_full = predictor.predict(z, t, cond, instruction)
    return (
        e_uncond
        + cfg.image_guidance * (e_image - e_uncond)
        + cfg.text_guidance * (e_full - e_image)
    ).astype(np.float32)


def purify(
    image_adv: ImageTensor,
    checkpoint: PurifierCheckpoint,
    codec,
    predictor,
    cfg: SamplerConfig,
) -> ImageTensor:
    """Map an (assumed adversarial) image to its purified counterpart.

    Deterministic for fixed (inputs, cfg.seed); output has the input's
    shape with values in [0,1].
    """
    if checkpoint.params:
        predictor.load_params(checkpoint.params)
    schedule: DiffusionSchedule = checkpoint.schedule
    t_start = cfg.t_start if cfg.t_start is not None else int(round(0.3 * schedule.T))
    t_start = min(max(t_start, 0), schedule.T - 1)
    cond = codec.encode(image_adv)
    gen = Rng(cfg.seed).generator()
    eps0 = gen.standard_normal(cond.shape).astype(np.float32)
    z = add_noise(cond, t_start, eps0, schedule)
    ts = _timesteps(t_start, max(cfg.steps, 1))
    for i, t in enumerate(ts):
        eps_hat = _guided_eps(predictor, z, t, cond, checkpoint.instruction, cfg)
        a, b = schedule.coeffs(t)
        z0_hat = (z - b * eps_hat) / max(a, 1e-6)
        if not np.all(np.isfinite(z0_hat)):
            raise SamplerDiverged(f"non-finite latent at step t={t}")
        if i + 1 < len(ts):
            a2, b2 = schedule.coeffs(ts[i + 1])
            z = (a2 * z0_hat + b2 * eps_hat).astype(np.float32)
        else:
            z = z0_hat.astype(np.float32)
    out = clip01(codec.decode(z))
    suffix = "_purified" if image_adv.id else "purified"
    return ImageTensor(data=out, id=f"{image_adv.id}{suffix}".lstrip("_") or "purified")
