"""Adversarial-clean pair manifests: JSON-lines schema, loading, splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import DanglingRef, DegenerateSplit, MissingFile, SchemaError, ShapeMismatch
from .images import ImageTensor, read_image
from .rng import Rng

SPLITS = ("train", "test")


@dataclass(frozen=True, eq=False)
class AdvPair:
    """One supervised training atom: adversarial image, its clean original,
    and the attack metadata that produced it."""

    adv: ImageTensor
    clean: ImageTensor
    attack_name: str
    epsilon: float
    target_text: str | None = None

    def __post_init__(self):
        if self.adv.shape != self.clean.shape:
            raise ShapeMismatch(
                f"adv/clean shape mismatch: {self.adv.shape} vs {self.clean.shape}"
            )

    @property
    def linf(self) -> float:
        return float(np.abs(self.adv.data - self.clean.data).max())


@dataclass(frozen=True)
class PairEntry:
    adv_path: str
    clean_path: str
    attack_name: str
    epsilon: float
    target_text: str | None
    split: str

    @property
    def clean_id(self) -> str:
        return Path(self.clean_path).stem

    def to_json_obj(self) -> dict:
        return {
            "adv": self.adv_path,
            "clean": self.clean_path,
            "attack": self.attack_name,
            "epsilon": self.epsilon,
            "target": self.target_text,
            "split": self.split,
        }


@dataclass(frozen=True)
class PairManifest:
    """Ordered pair entries plus the directory relative paths resolve against."""

    entries: tuple[PairEntry, ...]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def load_pair(self, entry: PairEntry) -> AdvPair:
        adv = read_image(self.resolve(entry.adv_path))
        clean = read_image(self.resolve(entry.clean_path))
        return AdvPair(
            adv=adv,
            clean=clean,
            attack_name=entry.attack_name,
            epsilon=entry.epsilon,
            target_text=entry.target_text,
        )

    def load_pairs(self, split: str | None = None) -> list[AdvPair]:
        return [self.load_pair(e) for e in self.subset(split).entries]

    def subset(self, split: str | None) -> "PairManifest":
        if split is None:
            return self
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return PairManifest(
            entries=tuple(e for e in self.entries if e.split == split), root=self.root
        )


_REQUIRED = {
    "adv": str,
    "clean": str,
    "attack": str,
    "epsilon": (int, float),
    "split": str,
}


def _parse_entry(obj: dict, line_no: int) -> PairEntry:
    if not isinstance(obj, dict):
        raise SchemaError("entry is not a JSON object", line=line_no)
    for key, typ in _REQUIRED.items():
        if key not in obj:
            raise SchemaError(f"missing required field {key!r}", line=line_no)
        if not isinstance(obj[key], typ):
            raise SchemaError(
                f"field {key!r} has wrong type {type(obj[key]).__name__}", line=line_no
            )
    if "target" not in obj:
        raise SchemaError("missing required field 'target'", line=line_no)
    target = obj["target"]
    if target is not None and not isinstance(target, str):
        raise SchemaError("field 'target' must be string or null", line=line_no)
    if obj["split"] not in SPLITS:
        raise SchemaError(f"split must be one of {SPLITS}, got {obj['split']!r}", line=line_no)
    unknown = set(obj) - set(_REQUIRED) - {"target"}
    if unknown:
        raise SchemaError(f"unknown fields {sorted(unknown)}", line=line_no)
    return PairEntry(
        adv_path=obj["adv"],
        clean_path=obj["clean"],
        attack_name=obj["attack"],
        epsilon=float(obj["epsilon"]),
        target_text=target,
        split=obj["split"],
    )


def load_manifest(path: Path | str) -> PairManifest:
    """Read and validate a JSON-lines pair manifest.

    Raises MissingFile, SchemaError (with the 1-based line number), or
    DanglingRef when a referenced image path does not resolve.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such manifest: {path}")
    root = path.parent
    entries: list[PairEntry] = []
    seen_split_by_id: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            entry = _parse_entry(obj, line_no)
            for ref in (entry.adv_path, entry.clean_path):
                resolved = Path(ref) if Path(ref).is_absolute() else root / ref
                if not resolved.exists():
                    raise DanglingRef(f"line {line_no}: image path not found: {ref}")
            prev = seen_split_by_id.get(entry.clean_id)
            if prev is not None and prev != entry.split:
                raise SchemaError(
                    f"clean id {entry.clean_id!r} appears in both splits", line=line_no
                )
            seen_split_by_id[entry.clean_id] = entry.split
            entries.append(entry)
    return PairManifest(entries=tuple(entries), root=root)


def save_manifest(manifest: PairManifest, path: Path | str) -> None:
    """Write entries as canonical JSON lines; writer then reader is identity."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in manifest.entries:
            fh.write(json.dumps(entry.to_json_obj(), separators=(", ", ": ")))
            fh.write("\n")


def manifest_digest(manifest: PairManifest) -> str:
    import hashlib

    h = hashlib.sha256()
    for entry in manifest.entries:
        h.update(json.dumps(entry.to_json_obj(), sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def split_manifest(manifest: PairManifest, train_fraction: float, rng: Rng) -> PairManifest:
    """Reassign train/test splits, disjoint by clean-image id.

    Whole clean-id groups are assigned to the train side until it reaches
    round(train_fraction * N) entries; with unique clean ids the count is
    met exactly. Deterministic for a fixed seed.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0,1), got {train_fraction}")
    n = len(manifest.entries)
    target = int(round(train_fraction * n))
    groups: dict[str, list[int]] = {}
    for idx, entry in enumerate(manifest.entries):
        groups.setdefault(entry.clean_id, []).append(idx)
    order = rng.generator().permutation(sorted(groups.keys()))
    train_idx: set[int] = set()
    for cid in order:
        if len(train_idx) >= target:
            break
        train_idx.update(groups[cid])
    if len(train_idx) == 0 or len(train_idx) == n:
        raise DegenerateSplit(
            f"split of {n} entries at fraction {train_fraction} left one side empty"
        )
    new_entries = tuple(
        replace(entry, split="train" if idx in train_idx else "test")
        for idx, entry in enumerate(manifest.entries)
    )
    return PairManifest(entries=new_entries, root=manifest.root)
