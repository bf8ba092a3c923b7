"""L-infinity projected-gradient attack forge for adversarial-clean pairs.

Untargeted attacks ascend an agreement loss (push the response away from
the reference); targeted attacks descend the loss toward a chosen target
response. Every trajectory step is projected back into the epsilon ball
and the valid pixel range, and the best iterate by loss is returned.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import (
    AdvPair,
    ImageTensor,
    PairEntry,
    PairManifest,
    Rng,
    clip01,
    load_manifest,
    read_image,
    save_manifest,
    write_npybin,
    write_png,
)
from .errors import OracleFailure

BUDGET_TOL = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 10
    step_size: float = 0.0
    targeted: bool = False
    target_text: str | None = None
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size > self.epsilon:
            raise ValueError("step_size must not exceed epsilon")
        if self.targeted and not self.target_text:
            raise ValueError("targeted attack requires target_text")


@runtime_checkable
class GradOracle(Protocol):
    """Differentiable agreement-loss surrogate for a captioner/VLM.

    Implementations may set `concurrent_safe = False` (the default
    assumption) to force the forge to serialize calls.
    """

    def loss(self, image: np.ndarray, text: str, reference_text: str) -> float: ...

    def grad_wrt_image(self, image: np.ndarray, text: str, reference_text: str) -> np.ndarray: ...


def _check_finite_grad(g: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.asarray(g, dtype=np.float32)
    if g.shape != shape:
        raise OracleFailure(f"gradient shape {g.shape} does not match image shape {shape}")
    if not np.all(np.isfinite(g)):
        raise OracleFailure("oracle returned non-finite gradient")
    return g


def _check_finite_loss(value: float) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise OracleFailure("oracle returned non-finite loss")
    return value


def _pgd(
    oracle: GradOracle,
    image: ImageTensor,
    text: str,
    reference: str,
    cfg: AttackConfig,
    ascend: bool,
) -> AdvPair:
    x0 = image.data.astype(np.float32)
    eps = float(cfg.epsilon)
    x = x0.copy()
    if cfg.random_start and eps > 0:
        gen = Rng(cfg.seed).generator()
        x = clip01(x0 + gen.uniform(-eps, eps, size=x0.shape).astype(np.float32))
    sign = 1.0 if ascend else -1.0
    best = x.copy()
    best_loss = _check_finite_loss(oracle.loss(x, text, reference))
    start_loss = _check_finite_loss(oracle.loss(x0, text, reference))
    if (ascend and start_loss > best_loss) or (not ascend and start_loss < best_loss):
        best, best_loss = x0.copy(), start_loss
    for _ in range(cfg.steps):
        g = _check_finite_grad(oracle.grad_wrt_image(x, text, reference), x0.shape)
        x = x + sign * cfg.step_size * np.sign(g, dtype=np.float32)
        x = x0 + np.clip(x - x0, -eps, eps)
        x = clip01(x)
        assert float(np.abs(x - x0).max()) <= eps + BUDGET_TOL
        loss = _check_finite_loss(oracle.loss(x, text, reference))
        if (ascend and loss >= best_loss) or (not ascend and loss <= best_loss):
            best, best_loss = x.copy(), loss
    adv = ImageTensor(data=best, id=f"{image.id}_adv" if image.id else "adv")
    return AdvPair(
        adv=adv,
        clean=image,
        attack_name="pgd_targeted" if cfg.targeted else "pgd_untargeted",
        epsilon=eps,
        target_text=cfg.target_text if cfg.targeted else None,
    )


def pgd_untargeted(
    oracle: GradOracle, image: ImageTensor, text: str, reference: str, cfg: AttackConfig
) -> AdvPair:
    """Maximize the agreement loss against `reference` within the budget."""
    if cfg.targeted:
        raise ValueError("pgd_untargeted requires cfg.targeted = False")
    return _pgd(oracle, image, text, reference, cfg, ascend=True)


def pgd_targeted(
    oracle: GradOracle, image: ImageTensor, text: str, target: str, cfg: AttackConfig
) -> AdvPair:
    """Minimize the loss toward the target response within the budget."""
    if not cfg.targeted:
        raise ValueError("pgd_targeted requires cfg.targeted = True")
    if cfg.target_text is not None and cfg.target_text != target:
        raise ValueError("cfg.target_text disagrees with the target argument")
    return _pgd(oracle, image, text, target, cfg, ascend=False)


def forge_dataset(
    images: Sequence[ImageTensor],
    oracle: GradOracle,
    cfg: AttackConfig,
    out_dir: Path | str,
    text: str = "",
    reference_texts: Sequence[str] | None = None,
    split: str = "train",
    write_previews: bool = True,
) -> PairManifest:
    """Attack every input image and write pairs + manifest under out_dir.

    Pairs are stored as raw float32 tensors so the recorded epsilon budget
    survives the round trip exactly; PNG previews sit alongside. The same
    inputs and seed produce byte-identical outputs.
    """
    if len(images) == 0:
        raise ValueError("forge_dataset needs a non-empty image list")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[PairEntry] = []
    for i, image in enumerate(images):
        ref = reference_texts[i] if reference_texts is not None else (cfg.target_text or "")
        item_cfg = cfg if not cfg.random_start else _reseeded(cfg, Rng(cfg.seed).child(i).seed)
        try:
            if cfg.targeted:
                pair = pgd_targeted(oracle, image, text, ref, item_cfg)
            else:
                pair = pgd_untargeted(oracle, image, text, ref, item_cfg)
        except OracleFailure as exc:
            raise OracleFailure(f"item {image.id or i}: {exc}") from exc
        assert pair.linf <= cfg.epsilon + BUDGET_TOL
        stem = image.id or f"img{i:05d}"
        clean_name = f"{stem}_clean.npybin"
        adv_name = f"{stem}_adv.npybin"
        write_npybin(pair.clean, out_dir / clean_name)
        write_npybin(pair.adv, out_dir / adv_name)
        if write_previews:
            write_png(pair.clean, out_dir / f"{stem}_clean.png")
            write_png(pair.adv, out_dir / f"{stem}_adv.png")
        entries.append(
            PairEntry(
                adv_path=adv_name,
                clean_path=clean_name,
                attack_name=pair.attack_name,
                epsilon=cfg.epsilon,
                target_text=pair.target_text,
                split=split,
            )
        )
    manifest = PairManifest(entries=tuple(entries), root=out_dir)
    save_manifest(manifest, out_dir / "pairs.jsonl")
    return load_manifest(out_dir / "pairs.jsonl")


def _reseeded(cfg: AttackConfig, seed: int) -> AttackConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def ingest_pairs(
    adv_paths: Sequence[Path | str],
    clean_paths: Sequence[Path | str],
    attack_name: str,
    manifest_path: Path | str,
    epsilon: float | None = None,
    target_text: str | None = None,
    split: str = "train",
) -> PairManifest:
    """Wrap externally generated attack outputs into a pair manifest.

    When no epsilon is declared by the upstream artifact, the measured
    max|adv - clean| of each pair is recorded instead.
    """
    if len(adv_paths) != len(clean_paths):
        raise ValueError("adv_paths and clean_paths must align")
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries: list[PairEntry] = []
    for adv_p, clean_p in zip(adv_paths, clean_paths):
        adv_p, clean_p = Path(adv_p), Path(clean_p)
        if epsilon is None:
            adv = read_image(adv_p)
            clean = read_image(clean_p)
            eps = float(np.abs(adv.data - clean.data).max())
        else:
            eps = float(epsilon)
        entries.append(
            PairEntry(
                adv_path=_relativize(adv_p, root),
                clean_path=_relativize(clean_p, root),
                attack_name=attack_name,
                epsilon=eps,
                target_text=target_text,
                split=split,
            )
        )
    manifest = PairManifest(entries=tuple(entries), root=root)
    save_manifest(manifest, manifest_path)
    return load_manifest(manifest_path)


def _relativize(path: Path, root: Path) -> str:
    try:
        return str(path.resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)
