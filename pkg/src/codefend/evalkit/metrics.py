"""Caption/answer metrics: CLIP score, attack success rate, VQA accuracy."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from ..core import ImageTensor
from ..errors import EncoderFailure, LengthMismatch, UntargetedItem

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


@runtime_checkable
class VisionTextEncoder(Protocol):
    def embed_image(self, image: ImageTensor) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class EvalRecord:
    id: str
    caption_or_answer: str
    clip_score: float
    target_hit: bool | None
    vqa_correct: bool | None
    condition: tuple[str, str, str]  # (model, attack, method)

    def __post_init__(self):
        if not 0.0 <= self.clip_score <= 100.0:
            raise ValueError(f"clip_score {self.clip_score} outside [0, 100]")


def _unit(vec: np.ndarray, what: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm == 0.0:
        raise EncoderFailure(f"{what} embedding is not unit-normalizable (norm={norm})")
    return vec / norm


def clip_score(image: ImageTensor, text: str, encoder: VisionTextEncoder) -> float:
    """100 * max(0, cosine) between image and text embeddings."""
    try:
        img_emb = encoder.embed_image(image)
        txt_emb = encoder.embed_text(text)
    except EncoderFailure:
        raise
    except Exception as exc:
        raise EncoderFailure(f"encoder failed: {exc}") from exc
    cos = float(np.dot(_unit(img_emb, "image"), _unit(txt_emb, "text")))
    return 100.0 * max(0.0, cos)


def target_hit(answer: str, target: str) -> bool:
    """Case-folded substring match; the weakest, most attack-favorable rule."""
    return target.casefold() in answer.casefold()


def asr(items: Sequence) -> float:
    """Attack success rate over targeted items, as a percentage.

    Accepts EvalRecords (their target_hit flags are used) or raw
    (answer, target) pairs. Items without a target raise UntargetedItem.
    """
    if len(items) == 0:
        raise ValueError("asr needs at least one item")
    hits = 0
    for i, item in enumerate(items):
        if isinstance(item, EvalRecord):
            if item.target_hit is None:
                raise UntargetedItem(f"record {item.id!r} has no target_hit flag")
            hits += int(item.target_hit)
        else:
            answer, target = item
            if not target:
                raise UntargetedItem(f"item {i} lacks a target string")
            hits += int(target_hit(answer, target))
    return 100.0 * hits / len(items)


def normalize_answer(text: str) -> list[str]:
    """Case-fold, strip punctuation, drop articles; returns token list."""
    tokens = text.casefold().translate(_PUNCT_TABLE).split()
    return [t for t in tokens if t not in _ARTICLES]


def _contains_span(haystack: list[str], needle: list[str]) -> bool:
    if not needle:
        return False
    n = len(needle)
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def vqa_answer_correct(answer: str, golds: str | Iterable[str]) -> bool:
    if isinstance(golds, str):
        golds = [golds]
    ans_tokens = normalize_answer(answer)
    for gold in golds:
        gold_tokens = normalize_answer(gold)
        if ans_tokens == gold_tokens or _contains_span(ans_tokens, gold_tokens):
            return True
    return False


def vqa_accuracy(answers: Sequence[str], golds: Sequence) -> float:
    """Percentage of answers matching a gold after normalization."""
    if len(answers) != len(golds):
        raise LengthMismatch(f"{len(answers)} answers vs {len(golds)} golds")
    if len(answers) == 0:
        raise ValueError("vqa_accuracy needs at least one item")
    correct = sum(int(vqa_answer_correct(a, g)) for a, g in zip(answers, golds))
    return 100.0 * correct / len(answers)
