"""(query, prefix) training pairs distilled from optimized prompts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from ..errors import AlignmentError, EmptyPrefix
from ..promptopt import PromptRecord

DEFAULT_TEMPLATE = "<s>[INST] Add prefix to: {question} [/INST] {prefix}</s>"


@dataclass(frozen=True)
class PrefixSample:
    query: str
    prefix: str
    source_image_id: str
    rendered: str = ""

    def __post_init__(self):
        if not self.query:
            raise ValueError("query must be non-empty")
        if not self.prefix:
            raise EmptyPrefix(f"empty prefix for query {self.query!r}")


def render_template(template: str, question: str, prefix: str) -> str:
    return template.format(question=question, prefix=prefix)


def split_template(template: str) -> tuple[str, str]:
    """(head-with-question-slot, tail) around the prefix slot."""
    if template.count("{prefix}") != 1:
        raise ValueError("template must contain exactly one {prefix} slot")
    head, tail = template.split("{prefix}")
    return head, tail


def build_prefix_dataset(
    records: Sequence[tuple[str, PromptRecord]],
    queries: Sequence[tuple[str, str]],
    template: str,
    detokenize: Callable[[Sequence[int]], str],
) -> list[PrefixSample]:
    """One sample per optimized-prompt record, aligned with queries by id.

    The prefix text is the detokenized optimized token sequence; the
    template expansion is stored verbatim on each sample.
    """
    if len(records) != len(queries):
        raise AlignmentError(
            f"{len(records)} records vs {len(queries)} queries"
        )
    samples: list[PrefixSample] = []
    for (rec_id, record), (q_id, query) in zip(records, queries):
        if rec_id != q_id:
            raise AlignmentError(f"record id {rec_id!r} does not match query id {q_id!r}")
        prefix = detokenize(record.optimized)
        if not prefix.strip():
            raise EmptyPrefix(f"record {rec_id!r} detokenized to an empty prefix")
        samples.append(
            PrefixSample(
                query=query,
                prefix=prefix,
                source_image_id=rec_id,
                rendered=render_template(template, query, prefix),
            )
        )
    return samples


def save_prefix_dataset(samples: Sequence[PrefixSample], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {"query": s.query, "prefix": s.prefix, "image_id": s.source_image_id},
                    separators=(", ", ": "),
                )
                + "\n"
            )


def load_prefix_dataset(path: Path | str, template: str = DEFAULT_TEMPLATE) -> list[PrefixSample]:
    path = Path(path)
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            samples.append(
                PrefixSample(
                    query=obj["query"],
                    prefix=obj["prefix"],
                    source_image_id=obj.get("image_id", ""),
                    rendered=render_template(template, obj["query"], obj["prefix"]),
                )
            )
    return samples
