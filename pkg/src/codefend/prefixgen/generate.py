"""Protective-prefix generation from a query."""

from __future__ import annotations

from dataclasses import dataclass

from .dataset import DEFAULT_TEMPLATE, split_template
from .surrogate import TinyCausalLm


@dataclass(frozen=True)
class DecodeConfig:
    max_length: int = 64
    strategy: str = "greedy"  # greedy | sampled
    seed: int = 0
    template: str = DEFAULT_TEMPLATE


@dataclass(frozen=True)
class GeneratedPrefix:
    text: str
    truncated: bool = False

    def __str__(self) -> str:
        return self.text


def generate_prefix(query: str, provider: TinyCausalLm, decode_cfg: DecodeConfig) -> GeneratedPrefix:
    """Decode a prefix for the query; greedy decoding is deterministic.

    Scaffolding tokens never appear in the output; hitting max_length
    without a terminator returns the truncated prefix with the flag set.
    """
    head_tpl, _tail = split_template(decode_cfg.template)
    context = provider.tokenize(head_tpl.format(question=query))
    ids, truncated = provider.generate_ids(
        context,
        max_new=decode_cfg.max_length,
        strategy=decode_cfg.strategy,
        seed=decode_cfg.seed,
    )
    text = provider.detokenize(ids, skip_special=True)
    return GeneratedPrefix(text=text, truncated=truncated)
