"""End-to-end defense: purify the image, generate a protective prefix,
then query the protected model exactly once, under a black-box contract."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

from .core import ImageTensor, PairManifest, write_npybin
from .errors import AlignmentError, StageFailure
from .prefixgen import DecodeConfig, GeneratedPrefix, generate_prefix, load_adapter
from .purifier import SamplerConfig, load_checkpoint, purify


@runtime_checkable
class VictimVlm(Protocol):
    """Black-box protected model: text in, text out, given an image.

    The interface deliberately exposes nothing else (no parameters, no
    gradients, no internals).
    """

    def generate(self, text: str, image: ImageTensor) -> str: ...


class ProviderRegistry:
    """Role -> implementation mapping for a pipeline run."""

    ROLES = (
        "vision_encoder",
        "surrogate_scorer",
        "victim_vlm",
        "prefix_lm",
        "purifier_codec",
        "purifier_predictor",
    )

    def __init__(self, **providers):
        self._providers: dict[str, object] = {}
        for role, impl in providers.items():
            self.register(role, impl)

    def register(self, role: str, impl: object) -> None:
        if role not in self.ROLES:
            raise ValueError(f"unknown provider role {role!r}; known: {self.ROLES}")
        self._providers[role] = impl

    def resolve(self, role: str):
        if role not in self._providers:
            raise KeyError(f"no provider registered for role {role!r}")
        return self._providers[role]

    def has(self, role: str) -> bool:
        return role in self._providers


@dataclass(frozen=True)
class DefenseConfig:
    purifier_checkpoint: str
    adapter_checkpoint: str | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    seed: int = 0
    allow_degraded: bool = False
    out_dir: str | None = None


@dataclass
class DefenseTrace:
    item_id: str
    purified_image_path: str | None
    purified_sha256: str
    prefix_conditioning_image_sha256: str
    prefix: str
    answer: str | None
    timings_ms: dict[str, float]
    stage_errors: list[str] = field(default_factory=list)
    degraded: bool = False

    def to_json_obj(self) -> dict:
        return {
            "item_id": self.item_id,
            "purified_image_path": self.purified_image_path,
            "purified_sha256": self.purified_sha256,
            "prefix_conditioning_image_sha256": self.prefix_conditioning_image_sha256,
            "prefix": self.prefix,
            "answer": self.answer,
            "timings_ms": self.timings_ms,
            "stage_errors": self.stage_errors,
            "degraded": self.degraded,
        }

    def stable_hash(self) -> str:
        """Content hash over everything except wall-clock timings."""
        obj = self.to_json_obj()
        obj.pop("timings_ms")
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


class _Prepared:
    def __init__(self, cfg: DefenseConfig, registry: ProviderRegistry):
        self.checkpoint = load_checkpoint(cfg.purifier_checkpoint)
        self.codec = registry.resolve("purifier_codec")
        self.predictor = registry.resolve("purifier_predictor")
        self.prefix_lm = registry.resolve("prefix_lm")
        self.victim: VictimVlm = registry.resolve("victim_vlm")  # type: ignore[assignment]
        if cfg.adapter_checkpoint:
            adapter = load_adapter(
                cfg.adapter_checkpoint,
                expected_base_fingerprint=self.prefix_lm.base_fingerprint(),
            )
            self.prefix_lm.attach_adapter(adapter)


def _concat(prefix: str, query: str) -> str:
    return f"{prefix} {query}" if prefix else query


def defend(
    x_adv: ImageTensor,
    q: str,
    cfg: DefenseConfig,
    registry: ProviderRegistry,
    _prepared: _Prepared | None = None,
) -> tuple[str, DefenseTrace]:
    """Run purify -> prefix -> victim inference on one item.

    The victim model sees only the purified image and is queried exactly
    once; a prefix-stage failure degrades to an empty prefix only when
    cfg.allow_degraded is set, and the trace records it.
    """
    prep = _prepared if _prepared is not None else _Prepared(cfg, registry)
    timings: dict[str, float] = {}
    stage_errors: list[str] = []
    degraded = False

    t0 = time.perf_counter()
    try:
        x_clean = purify(x_adv, prep.checkpoint, prep.codec, prep.predictor, cfg.sampler)
    except Exception as exc:
        raise StageFailure("purify", exc) from exc
    timings["purify"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    try:
        gen: GeneratedPrefix = generate_prefix(q, prep.prefix_lm, cfg.decode)
        prefix = gen.text
    except Exception as exc:
        if not cfg.allow_degraded:
            raise StageFailure("prefix", exc) from exc
        prefix = ""
        degraded = True
        stage_errors.append(f"prefix: {exc}")
    timings["prefix"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    try:
        answer = prep.victim.generate(_concat(prefix, q), x_clean)
    except Exception as exc:
        raise StageFailure("vlm", exc) from exc
    timings["vlm"] = (time.perf_counter() - t0) * 1000.0

    purified_path = None
    if cfg.out_dir:
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        purified_path = str(out_dir / f"{x_clean.id or 'purified'}.npybin")
        write_npybin(x_clean, purified_path)

    sha = x_clean.sha256()
    trace = DefenseTrace(
        item_id=x_adv.id,
        purified_image_path=purified_path,
        purified_sha256=sha,
        prefix_conditioning_image_sha256=sha,
        prefix=prefix,
        answer=answer,
        timings_ms=timings,
        stage_errors=stage_errors,
        degraded=degraded,
    )
    return answer, trace


def defend_batch(
    manifest: PairManifest,
    questions: Sequence[str],
    cfg: DefenseConfig,
    registry: ProviderRegistry,
) -> list[tuple[str, str | None, DefenseTrace]]:
    """Order-preserving batch defense with per-item failure isolation."""
    if len(questions) != len(manifest.entries):
        raise AlignmentError(
            f"{len(manifest.entries)} manifest entries vs {len(questions)} questions"
        )
    prep = _Prepared(cfg, registry)
    results: list[tuple[str, str | None, DefenseTrace]] = []
    for entry, question in zip(manifest.entries, questions):
        pair = manifest.load_pair(entry)
        item_id = pair.adv.id
        try:
            answer, trace = defend(pair.adv, question, cfg, registry, _prepared=prep)
        except StageFailure as exc:
            trace = DefenseTrace(
                item_id=item_id,
                purified_image_path=None,
                purified_sha256="",
                prefix_conditioning_image_sha256="",
                prefix="",
                answer=None,
                timings_ms={},
                stage_errors=[f"{exc.stage}: {exc.cause}"],
            )
            results.append((item_id, None, trace))
            continue
        results.append((item_id, answer, trace))
    return results


def write_traces(results: Sequence[tuple[str, str | None, DefenseTrace]], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for _item_id, _answer, trace in results:
            fh.write(json.dumps(trace.to_json_obj(), sort_keys=True) + "\n")
