"""Adapter-only fine-tuning of the prefix generator.

Teacher-forced cross-entropy over prefix tokens (plus the terminator);
query and template tokens are conditioning only and never contribute
target terms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..core import Rng
from ..errors import EmptyDataset, NonFiniteLoss
from .dataset import DEFAULT_TEMPLATE, PrefixSample, split_template
from .lora import LoraAdapter
from .surrogate import TinyCausalLm


@dataclass(frozen=True)
class PrefixTrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 100
    seed: int = 0
    template: str = DEFAULT_TEMPLATE
    log_path: str | None = None


def encode_sample(
    provider: TinyCausalLm, sample: PrefixSample, template: str
) -> tuple[list[int], list[bool]]:
    """Token ids for the rendered sample plus a per-prediction loss mask.

    mask[i] is True when the prediction at position i (of token i+1)
    targets a prefix or terminator token.
    """
    head_tpl, tail = split_template(template)
    head = head_tpl.format(question=sample.query)
    head_ids = provider.tokenize(head)
    target_ids = provider.tokenize(sample.prefix) + provider.tokenize(tail)
    ids = head_ids + target_ids
    # predictions are made at positions 0..len-2 for tokens 1..len-1
    mask = [False] * (len(ids) - 1)
    for pos in range(len(head_ids) - 1, len(ids) - 1):
        mask[pos] = True
    return ids, mask


def _batch_loss(provider: TinyCausalLm, encoded: list[tuple[list[int], list[bool]]]) -> torch.Tensor:
    pad = provider.tokenizer.pad_id
    max_len = max(len(ids) for ids, _ in encoded)
    ids_b = torch.full((len(encoded), max_len), pad, dtype=torch.long)
    mask_b = torch.zeros((len(encoded), max_len - 1), dtype=torch.bool)
    for row, (ids, mask) in enumerate(encoded):
        ids_b[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask_b[row, : len(mask)] = torch.tensor(mask, dtype=torch.bool)
    logits = provider.logits(ids_b)[:, :-1]
    targets = ids_b[:, 1:]
    losses = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    ).reshape(targets.shape)
    return losses[mask_b].mean()


def train_prefix_generator(
    samples: Sequence[PrefixSample],
    provider: TinyCausalLm,
    cfg: PrefixTrainConfig,
) -> LoraAdapter:
    """Optimize the attached adapter on (query, prefix) samples.

    Base weights stay bit-identical; returns the trained adapter. A
    per-epoch mean-loss CSV is written when cfg.log_path is set.
    """
    if not samples:
        raise EmptyDataset("no prefix samples to train on")
    if not provider._adapted:
        raise ValueError("provider has no adapter attached; call attach_adapter first")
    base_before = provider.base_fingerprint()
    encoded = [encode_sample(provider, s, cfg.template) for s in samples]
    opt = torch.optim.AdamW(provider.trainable_params(), lr=cfg.learning_rate)
    provider.module.train()
    history: list[tuple[int, float]] = []
    n = len(encoded)
    for epoch in range(cfg.epochs):
        order = Rng(cfg.seed).child(epoch).generator().permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch = [encoded[i] for i in order[start : start + cfg.batch_size]]
            loss = _batch_loss(provider, batch)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(value)
        history.append((epoch, float(np.mean(epoch_losses))))
    provider.module.eval()
    if provider.base_fingerprint() != base_before:
        raise RuntimeError("base weights changed during adapter training")
    if cfg.log_path:
        path = Path(cfg.log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss"])
            for epoch, mean_loss in history:
                writer.writerow([epoch, f"{mean_loss:.8f}"])
    return provider.export_adapter()
