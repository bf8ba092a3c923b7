"""Forward-noising schedule for the latent denoiser."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch, StepOutOfRange


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative noise-retention products alpha_bar, one per step.

    Values must be strictly decreasing, start near 1 and end near 0; the
    exact endpoints 1.0 and 0.0 are admitted so endpoint identities stay
    testable.
    """

    alpha_bar: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.alpha_bar, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("alpha_bar must be a 1-d array with at least 2 steps")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("alpha_bar values must lie in [0, 1]")
        if not np.all(np.diff(arr) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if arr[0] < 0.5 or arr[-1] > 0.5:
            raise ValueError("alpha_bar must start near 1 and end near 0")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "alpha_bar", arr)

    @property
    def T(self) -> int:
        return int(self.alpha_bar.size)

    def coeffs(self, t: int) -> tuple[float, float]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) with range checking."""
        if not 0 <= t < self.T:
            raise StepOutOfRange(f"step {t} outside [0, {self.T})")
        ab = float(self.alpha_bar[t])
        return math.sqrt(ab), math.sqrt(1.0 - ab)


def cosine_schedule(T: int, s: float = 0.008) -> DiffusionSchedule:
    """Squared-cosine alpha_bar, evaluated strictly inside (0, 1)."""
    if T < 2:
        raise ValueError("schedule needs T >= 2")

    def f(u: float) -> float:
        return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2

    base = f(0.0)
    values = np.array([f((t + 1) / (T + 1)) / base for t in range(T)], dtype=np.float64)
    return DiffusionSchedule(alpha_bar=values)


def add_noise(
    z0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule
) -> np.ndarray:
    """Variance-preserving forward step: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    z0 = np.asarray(z0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    a, b = schedule.coeffs(t)
    return (a * z0 + b * eps).astype(np.float32)
