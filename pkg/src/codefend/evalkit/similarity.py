"""Feature-level purification analysis: cosine triples per sample."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import ImageTensor
from ..errors import EncoderFailure, ShapeMismatch
from .metrics import VisionTextEncoder


@dataclass(frozen=True)
class SimilarityTriple:
    sim_purified_original: float
    sim_purified_adversarial: float
    sim_noise_perturbation: float
    flagged: bool = False

    def __post_init__(self):
        for name in ("sim_purified_original", "sim_purified_adversarial", "sim_noise_perturbation"):
            v = getattr(self, name)
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise ValueError(f"{name}={v} outside [-1, 1]")


def _cos(u: np.ndarray, v: np.ndarray, what: str) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise EncoderFailure(f"zero-norm {what} vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def feature_similarity(
    original: ImageTensor,
    adversarial: ImageTensor,
    purified: ImageTensor,
    encoder: VisionTextEncoder,
) -> SimilarityTriple:
    """Purified-vs-original and purified-vs-adversarial cosines in feature
    space, plus the pixel-space cosine of removed noise against the
    adversarial perturbation.

    A zero removed-noise or zero perturbation vector makes the pixel
    cosine undefined; that case returns a flagged 0.0 instead of failing.
    """
    if not (original.shape == adversarial.shape == purified.shape):
        raise ShapeMismatch(
            f"shapes differ: {original.shape} / {adversarial.shape} / {purified.shape}"
        )
    try:
        f_orig = encoder.embed_image(original)
        f_adv = encoder.embed_image(adversarial)
        f_pur = encoder.embed_image(purified)
    except EncoderFailure:
        raise
    except Exception as exc:
        raise EncoderFailure(f"encoder failed: {exc}") from exc
    sim_po = _cos(f_pur, f_orig, "feature")
    sim_pa = _cos(f_pur, f_adv, "feature")

    removed = (adversarial.data - purified.data).astype(np.float64).ravel()
    perturb = (adversarial.data - original.data).astype(np.float64).ravel()
    if np.linalg.norm(removed) == 0.0 or np.linalg.norm(perturb) == 0.0:
        return SimilarityTriple(sim_po, sim_pa, 0.0, flagged=True)
    sim_np = _cos(removed, perturb, "pixel")
    return SimilarityTriple(sim_po, sim_pa, sim_np, flagged=False)


def write_similarity_dump(
    rows: Sequence[tuple[str, SimilarityTriple]], path: Path | str
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "sim_po", "sim_pa", "sim_np", "flagged"])
        for item_id, triple in rows:
            writer.writerow(
                [
                    item_id,
                    f"{triple.sim_purified_original:.6f}",
                    f"{triple.sim_purified_adversarial:.6f}",
                    f"{triple.sim_noise_perturbation:.6f}",
                    int(triple.flagged),
                ]
            )
