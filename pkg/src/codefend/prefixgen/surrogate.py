"""Desk-scale prefix language model: a 2-layer causal transformer over a
fixed character vocabulary, with query/value projections exposed as
adapter targets."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import Rng
from .lora import LoraAdapter, LoraLinear, lora_wrap

_SPECIALS = ("<pad>", "<s>", "</s>", "[INST]", "[/INST]")
_CHARS = [chr(c) for c in range(32, 127)]


class CharTokenizer:
    """Character-level tokenizer with literal special tokens."""

    def __init__(self):
        self.id_to_token = list(_SPECIALS) + _CHARS
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.pad_id = self.token_to_id["<pad>"]
        self.bos_id = self.token_to_id["<s>"]
        self.eos_id = self.token_to_id["</s>"]
        self.special_ids = frozenset(self.token_to_id[t] for t in _SPECIALS)

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        i = 0
        while i < len(text):
            for special in _SPECIALS[1:]:
                if text.startswith(special, i):
                    ids.append(self.token_to_id[special])
                    i += len(special)
                    break
            else:
                ch = text[i]
                if ch not in self.token_to_id:
                    raise ValueError(f"character {ch!r} not in tokenizer vocabulary")
                ids.append(self.token_to_id[ch])
                i += 1
        return ids

    def detokenize(self, ids, skip_special: bool = False) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if skip_special and i in self.special_ids:
                continue
            parts.append(self.id_to_token[i])
        return "".join(parts)


class _Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model, bias=False)
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model, bias=False)
        self.o = nn.Linear(d_model, d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bsz, seq, dim = x.shape
        def heads(t):
            return t.view(bsz, seq, self.n_heads, self.head_dim).transpose(1, 2)
        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(seq, seq, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(bsz, seq, dim)
        return self.o(out)


class _Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = _Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model),
            nn.GELU(),
            nn.Linear(mlp_ratio * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class _Backbone(nn.Module):
    def __init__(self, vocab_size: int, d_model: int, n_heads: int, n_layers: int, max_len: int):
        super().__init__()
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Embedding(max_len, d_model)
        self.blocks = nn.ModuleList(_Block(d_model, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, vocab_size, bias=False)
        self.max_len = max_len

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        seq = ids.shape[1]
        if seq > self.max_len:
            raise ValueError(f"sequence length {seq} exceeds max_len {self.max_len}")
        pos = torch.arange(seq)[None, :]
        x = self.tok_emb(ids) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


class TinyCausalLm:
    """Prefix-LM provider over the character tokenizer.

    Only attached adapter factors are trainable; with an all-zero B the
    provider's outputs are identical to the unadapted base model.
    """

    ADAPTER_TARGETS = ("attn.q", "attn.v")

    def __init__(
        self,
        d_model: int = 256,
        n_heads: int = 4,
        n_layers: int = 2,
        max_len: int = 256,
        seed: int = 0,
    ):
        self.tokenizer = CharTokenizer()
        self.module = _Backbone(self.tokenizer.vocab_size, d_model, n_heads, n_layers, max_len)
        self.d_model = d_model
        self._init_params(seed)
        for p in self.module.parameters():
            p.requires_grad_(False)
        self._adapted: dict[str, LoraLinear] = {}

    def _init_params(self, seed: int) -> None:
        gen = Rng(seed).generator()
        with torch.no_grad():
            for name, p in sorted(self.module.named_parameters(), key=lambda kv: kv[0]):
                if "ln" in name and name.endswith("weight"):
                    p.copy_(torch.ones_like(p))
                elif name.endswith("bias") or ("ln" in name):
                    p.copy_(torch.zeros_like(p))
                else:
                    vals = gen.standard_normal(tuple(p.shape)) * 0.02
                    p.copy_(torch.from_numpy(vals.astype(np.float32)))

    # -- adapter plumbing ---------------------------------------------------

    def adapter_target_dims(self) -> list[tuple[str, tuple[int, int]]]:
        out = []
        for i, _ in enumerate(self.module.blocks):
            for tgt in self.ADAPTER_TARGETS:
                out.append((f"blocks.{i}.{tgt}", (self.d_model, self.d_model)))
        return out

    def new_adapter(self, r: int = 8, alpha: float = 16.0, init_seed: int = 0) -> LoraAdapter:
        names = [name for name, _ in self.adapter_target_dims()]
        dims = [d for _, d in self.adapter_target_dims()]
        return lora_wrap(
            dims, r, alpha, init_seed, names=names, base_fingerprint=self.base_fingerprint()
        )

    def attach_adapter(self, adapter: LoraAdapter) -> None:
        if adapter.base_fingerprint and adapter.base_fingerprint != self.base_fingerprint():
            raise ValueError("adapter fingerprint does not match this base model")
        self.detach_adapter()
        for name, matrix in adapter.matrices.items():
            block_idx, attr = self._parse_target(name)
            attn = self.module.blocks[block_idx].attn
            base = getattr(attn, attr)
            if isinstance(base, LoraLinear):
                base = base.base
            wrapped = LoraLinear(base, matrix)
            setattr(attn, attr, wrapped)
            self._adapted[name] = wrapped

    def detach_adapter(self) -> None:
        for name, wrapped in self._adapted.items():
            block_idx, attr = self._parse_target(name)
            setattr(self.module.blocks[block_idx].attn, attr, wrapped.base)
        self._adapted = {}

    @staticmethod
    def _parse_target(name: str) -> tuple[int, str]:
        parts = name.split(".")  # blocks.<i>.attn.<q|v>
        return int(parts[1]), parts[3]

    def export_adapter(self) -> LoraAdapter:
        if not self._adapted:
            raise ValueError("no adapter attached")
        return LoraAdapter(
            matrices={name: ll.to_matrix() for name, ll in self._adapted.items()},
            base_fingerprint=self.base_fingerprint(),
        )

    def trainable_params(self):
        params = []
        for ll in self._adapted.values():
            params.extend([ll.lora_a, ll.lora_b])
        return params

    # -- hashing / inference -------------------------------------------------

    def base_param_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, p in sorted(self.module.named_parameters(), key=lambda kv: kv[0]):
            if "lora_a" in name or "lora_b" in name:
                continue
            arrays[name.replace(".base.", ".")] = p.detach().numpy().copy()
        return arrays

    def base_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.base_param_arrays().items():
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.tokenize(text)

    def detokenize(self, ids, skip_special: bool = False) -> str:
        return self.tokenizer.detokenize(ids, skip_special=skip_special)

    def logits(self, ids: torch.Tensor) -> torch.Tensor:
        return self.module(ids)

    def next_token_logprobs(self, context_ids) -> np.ndarray:
        self.module.eval()
        with torch.no_grad():
            ids = torch.tensor([list(context_ids)], dtype=torch.long)
            logits = self.module(ids)[0, -1]
            return F.log_softmax(logits, dim=-1).numpy()

    def generate_ids(
        self, context_ids, max_new: int, strategy: str = "greedy", seed: int = 0
    ) -> tuple[list[int], bool]:
        """Autoregressive continuation; returns (new ids, hit_length_limit)."""
        ids = list(context_ids)
        out: list[int] = []
        gen = Rng(seed).generator() if strategy == "sampled" else None
        for _ in range(max_new):
            logprobs = self.next_token_logprobs(ids)
            if strategy == "greedy":
                nxt = int(np.argmax(logprobs))
            elif strategy == "sampled":
                probs = np.exp(logprobs - logprobs.max())
                probs /= probs.sum()
                nxt = int(gen.choice(len(probs), p=probs))
            else:
                raise ValueError(f"unknown decode strategy {strategy!r}")
            if nxt == self.tokenizer.eos_id:
                return out, False
            out.append(nxt)
            ids.append(nxt)
            if len(ids) >= self.module.max_len:
                return out, True
        return out, True
