"""Low-rank adapters: rank-r factor pairs added to frozen weight matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from ..core import Rng
from ..errors import CheckpointCorrupt, RankTooLarge

_FORMAT = "codefend-adapter-v1"


@dataclass(frozen=True)
class LoraMatrix:
    a: np.ndarray  # (r, d_in)
    b: np.ndarray  # (d_out, r)
    rank: int
    alpha: float

    @property
    def d_in(self) -> int:
        return int(self.a.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.b.shape[0])

    def delta_w(self) -> np.ndarray:
        # float64 product keeps the mathematical rank bound visible to SVD
        return (self.alpha / self.rank) * (
            self.b.astype(np.float64) @ self.a.astype(np.float64)
        )

    def param_count(self) -> int:
        return self.a.size + self.b.size


@dataclass(frozen=True)
class LoraAdapter:
    matrices: dict[str, LoraMatrix]
    base_fingerprint: str = ""

    def trainable_param_count(self) -> int:
        return sum(m.param_count() for m in self.matrices.values())


def lora_wrap(
    base_dims: Sequence[tuple[int, int]],
    r: int,
    alpha: float,
    init_seed: int,
    names: Sequence[str] | None = None,
    base_fingerprint: str = "",
) -> LoraAdapter:
    """Fresh adapter: A from a zero-mean Gaussian, B zero, so the initial
    update is exactly zero. Trainable count is sum of r*(d_in + d_out)."""
    if r < 1:
        raise RankTooLarge("rank must be >= 1")
    if names is None:
        names = [f"m{i}" for i in range(len(base_dims))]
    if len(names) != len(base_dims):
        raise ValueError("names and base_dims must align")
    gen = Rng(init_seed).generator()
    matrices: dict[str, LoraMatrix] = {}
    for name, (d_in, d_out) in zip(names, base_dims):
        if r > min(d_in, d_out):
            raise RankTooLarge(f"rank {r} exceeds min dim of ({d_in}, {d_out})")
        a = (gen.standard_normal((r, d_in)) / np.sqrt(d_in)).astype(np.float32)
        b = np.zeros((d_out, r), dtype=np.float32)
        matrices[name] = LoraMatrix(a=a, b=b, rank=r, alpha=float(alpha))
    return LoraAdapter(matrices=matrices, base_fingerprint=base_fingerprint)


class LoraLinear(nn.Module):
    """Frozen base linear plus a trainable (alpha/r) * B @ A update."""

    def __init__(self, base: nn.Linear, matrix: LoraMatrix):
        super().__init__()
        if base.in_features != matrix.d_in or base.out_features != matrix.d_out:
            raise ValueError(
                f"adapter dims ({matrix.d_in}, {matrix.d_out}) do not fit base "
                f"({base.in_features}, {base.out_features})"
            )
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.from_numpy(matrix.a.copy()))
        self.lora_b = nn.Parameter(torch.from_numpy(matrix.b.copy()))
        self.scaling = matrix.alpha / matrix.rank
        self.rank = matrix.rank
        self.alpha = matrix.alpha

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * ((x @ self.lora_a.T) @ self.lora_b.T)

    def to_matrix(self) -> LoraMatrix:
        return LoraMatrix(
            a=self.lora_a.detach().numpy().copy(),
            b=self.lora_b.detach().numpy().copy(),
            rank=self.rank,
            alpha=self.alpha,
        )


def measured_rank(delta_w: np.ndarray, tol: float = 1e-8) -> int:
    s = np.linalg.svd(delta_w, compute_uv=False)
    return int(np.sum(s > tol))


def save_adapter(adapter: LoraAdapter, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": _FORMAT,
        "base_fingerprint": adapter.base_fingerprint,
        "matrices": {
            name: {"rank": m.rank, "alpha": m.alpha} for name, m in adapter.matrices.items()
        },
    }
    arrays = {}
    for name, m in adapter.matrices.items():
        arrays[f"A/{name}"] = m.a
        arrays[f"B/{name}"] = m.b
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
            **arrays,
        )


def load_adapter(path: Path | str, expected_base_fingerprint: str | None = None) -> LoraAdapter:
    path = Path(path)
    if not path.exists():
        raise CheckpointCorrupt(f"no such adapter checkpoint: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"].tobytes()).decode("utf-8"))
            if meta.get("format") != _FORMAT:
                raise CheckpointCorrupt(f"{path}: unknown format {meta.get('format')!r}")
            matrices = {}
            for name, mm in meta["matrices"].items():
                matrices[name] = LoraMatrix(
                    a=np.array(data[f"A/{name}"]),
                    b=np.array(data[f"B/{name}"]),
                    rank=int(mm["rank"]),
                    alpha=float(mm["alpha"]),
                )
    except CheckpointCorrupt:
        raise
    except Exception as exc:
        raise CheckpointCorrupt(f"cannot read adapter {path}: {exc}") from exc
    adapter = LoraAdapter(matrices=matrices, base_fingerprint=meta["base_fingerprint"])
    if (
        expected_base_fingerprint is not None
        and adapter.base_fingerprint != expected_base_fingerprint
    ):
        raise CheckpointCorrupt(
            f"adapter was trained against base {adapter.base_fingerprint[:12]}..., "
            f"refusing to load onto base {expected_base_fingerprint[:12]}..."
        )
    return adapter
