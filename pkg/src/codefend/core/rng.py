"""Deterministic randomness: one integer seed, reproducible streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Rng:
    """Seeded randomness handle. Same seed => same stream on the same build.

    `child` derives an independent, reproducible sub-stream from integer
    keys (epoch, step, item index, ...) so parallel/stage-local draws do
    not depend on call order elsewhere.
    """

    seed: int

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, *keys: int) -> "Rng":
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in keys))
        return Rng(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def torch_seed(self) -> int:
        # torch generators take a single int; reuse the derived-state trick
        return int(np.random.SeedSequence(self.seed).generate_state(1, dtype=np.uint64)[0])
