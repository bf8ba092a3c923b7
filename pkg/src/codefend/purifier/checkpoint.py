"""Purifier checkpoint container: schedule, instruction, metadata, params."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointCorrupt
from .schedule import DiffusionSchedule

_FORMAT = "codefend-purifier-v1"


@dataclass(frozen=True)
class PurifierCheckpoint:
    provider_name: str
    provider_version: str
    schedule: DiffusionSchedule
    instruction: str
    training_meta: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": _FORMAT,
            "provider_name": self.provider_name,
            "provider_version": self.provider_version,
            "instruction": self.instruction,
            "training_meta": self.training_meta,
            "param_names": sorted(self.params),
        }
        arrays = {f"param/{name}": arr for name, arr in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(
                fh,
                meta=np.frombuffer(
                    json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
                ),
                alpha_bar=self.schedule.alpha_bar,
                **arrays,
            )


def load_checkpoint(path: Path | str) -> PurifierCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointCorrupt(f"no such checkpoint: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"].tobytes()).decode("utf-8"))
            if meta.get("format") != _FORMAT:
                raise CheckpointCorrupt(f"{path}: unknown format {meta.get('format')!r}")
            schedule = DiffusionSchedule(alpha_bar=data["alpha_bar"])
            params = {}
            for name in meta["param_names"]:
                key = f"param/{name}"
                if key not in data:
                    raise CheckpointCorrupt(f"{path}: missing parameter blob {name!r}")
                params[name] = np.array(data[key])
    except CheckpointCorrupt:
        raise
    except Exception as exc:
        raise CheckpointCorrupt(f"cannot read checkpoint {path}: {exc}") from exc
    return PurifierCheckpoint(
        provider_name=meta["provider_name"],
        provider_version=meta["provider_version"],
        schedule=schedule,
        instruction=meta["instruction"],
        training_meta=meta["training_meta"],
        params=params,
    )
