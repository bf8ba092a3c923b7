"""Gradient-guided discrete prompt optimization.

First-order token-swap scoring proposes candidates per trigger position;
every proposal is re-ranked by the true oracle loss inside a beam search
that always retains its parents, so the best loss never increases across
rounds. An embedding-distance bound on the trigger block constrains the
search space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import ImageTensor
from .errors import OracleFailure, PositionNotMutable

_TOL = 1e-9


@dataclass(frozen=True)
class PromptSpace:
    vocab: tuple[int, ...]
    embeddings: np.ndarray  # (num_ids, dim), indexed by token id
    base_prompt_tokens: tuple[int, ...]
    trigger_positions: tuple[int, ...]
    delta_bound: float

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValueError("embeddings must be a 2-d table")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "vocab", tuple(int(v) for v in self.vocab))
        object.__setattr__(self, "base_prompt_tokens", tuple(int(t) for t in self.base_prompt_tokens))
        object.__setattr__(self, "trigger_positions", tuple(int(p) for p in self.trigger_positions))
        if self.delta_bound < 0:
            raise ValueError("delta_bound must be >= 0")
        n = len(self.base_prompt_tokens)
        for p in self.trigger_positions:
            if not 0 <= p < n:
                raise ValueError(f"trigger position {p} outside prompt of length {n}")
        max_id = max(self.vocab + self.base_prompt_tokens)
        if max_id >= emb.shape[0]:
            raise ValueError("embedding table too small for vocab/prompt token ids")

    def embed(self, token_id: int) -> np.ndarray:
        return self.embeddings[token_id]

    def dist(self, tokens: Sequence[int]) -> float:
        """Mean trigger-position embedding L2 distance from the base prompt."""
        if not self.trigger_positions:
            return 0.0
        total = 0.0
        for p in self.trigger_positions:
            total += float(
                np.linalg.norm(self.embed(tokens[p]) - self.embed(self.base_prompt_tokens[p]))
            )
        return total / len(self.trigger_positions)


@runtime_checkable
class ScoringOracle(Protocol):
    def loss(
        self,
        prompt_tokens: Sequence[int],
        query_tokens: Sequence[int],
        image: ImageTensor,
        y_true: Sequence[int],
    ) -> float: ...

    def grad_wrt_embedding(
        self,
        prompt_tokens: Sequence[int],
        query_tokens: Sequence[int],
        image: ImageTensor,
        y_true: Sequence[int],
        position: int,
    ) -> np.ndarray: ...


@dataclass(frozen=True)
class ScoringContext:
    query_tokens: tuple[int, ...]
    image: ImageTensor
    y_true: tuple[int, ...]

    def loss(self, oracle: ScoringOracle, tokens: Sequence[int]) -> float:
        value = float(oracle.loss(tokens, self.query_tokens, self.image, self.y_true))
        if not np.isfinite(value):
            raise OracleFailure(f"non-finite oracle loss for tokens {list(tokens)}")
        return value


@dataclass(frozen=True)
class Beam:
    prompt_tokens: tuple[int, ...]
    loss: float
    history: tuple[tuple[int, int, int, int], ...] = ()  # (round, position, old, new)


@dataclass(frozen=True)
class PromptRecord:
    base: tuple[int, ...]
    optimized: tuple[int, ...]
    final_loss: float
    rounds: int
    constraint_slack: float
    no_feasible: bool = False

    def __post_init__(self):
        if self.constraint_slack < -_TOL:
            raise ValueError(f"constraint violated: slack {self.constraint_slack}")


@dataclass(frozen=True)
class OptimizeConfig:
    rounds: int = 3
    beam_width: int = 4
    candidates_per_position: int = 16
    seed: int = 0
    trace_path: str | None = None


def write_prompt_records(records: Sequence[tuple[str, "PromptRecord"]], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec_id, rec in records:
            fh.write(
                json.dumps(
                    {
                        "id": rec_id,
                        "base": list(rec.base),
                        "optimized": list(rec.optimized),
                        "final_loss": rec.final_loss,
                        "rounds": rec.rounds,
                        "constraint_slack": rec.constraint_slack,
                        "no_feasible": rec.no_feasible,
                    }
                )
                + "\n"
            )


def read_prompt_records(path: Path | str) -> list[tuple[str, "PromptRecord"]]:
    out: list[tuple[str, PromptRecord]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(
                (
                    obj["id"],
                    PromptRecord(
                        base=tuple(obj["base"]),
                        optimized=tuple(obj["optimized"]),
                        final_loss=obj["final_loss"],
                        rounds=obj["rounds"],
                        constraint_slack=obj["constraint_slack"],
                        no_feasible=obj.get("no_feasible", False),
                    ),
                )
            )
    return out


def hotflip_candidates(
    beam: Beam,
    position: int,
    oracle: ScoringOracle,
    space: PromptSpace,
    k: int,
    ctx: ScoringContext,
) -> list[tuple[int, float]]:
    """k feasible swap candidates at `position`, sorted by predicted loss change.

    The first-order estimate is (e_new - e_cur) . grad; candidates whose
    hypothetical swap would break the distance bound are dropped before
    truncation. Ties break toward the lower token id.
    """
    if position not in space.trigger_positions:
        raise PositionNotMutable(f"position {position} is not a trigger position")
    grad = np.asarray(
        oracle.grad_wrt_embedding(beam.prompt_tokens, ctx.query_tokens, ctx.image, ctx.y_true, position),
        dtype=np.float64,
    )
    if not np.all(np.isfinite(grad)):
        raise OracleFailure(f"non-finite gradient at position {position}")
    cur = beam.prompt_tokens[position]
    e_cur = space.embed(cur)
    base_e = space.embed(space.base_prompt_tokens[position])
    n_trig = len(space.trigger_positions)
    dist_other = space.dist(beam.prompt_tokens) - float(np.linalg.norm(e_cur - base_e)) / n_trig
    scored: list[tuple[float, int]] = []
    for v in space.vocab:
        swap_dist = dist_other + float(np.linalg.norm(space.embed(v) - base_e)) / n_trig
        if swap_dist > space.delta_bound + _TOL:
            continue
        pred = float(np.dot(space.embed(v) - e_cur, grad))
        scored.append((pred, v))
    scored.sort(key=lambda sv: (sv[0], sv[1]))
    return [(v, pred) for pred, v in scored[:k]]


def beam_round(
    beams: Sequence[Beam],
    oracle: ScoringOracle,
    space: PromptSpace,
    beam_width: int,
    candidates_per_position: int,
    ctx: ScoringContext,
    round_no: int = 0,
) -> list[Beam]:
    """Expand every beam at every trigger position, re-rank by true loss.

    Parents stay in the pool, so the best loss is non-increasing; duplicate
    token sequences are merged.
    """
    if not beams:
        raise ValueError("beam_round needs at least one beam")
    pool: dict[tuple[int, ...], Beam] = {b.prompt_tokens: b for b in beams}
    for beam in beams:
        for position in space.trigger_positions:
            for v, _pred in hotflip_candidates(
                beam, position, oracle, space, candidates_per_position, ctx
            ):
                if v == beam.prompt_tokens[position]:
                    continue
                tokens = list(beam.prompt_tokens)
                old = tokens[position]
                tokens[position] = v
                key = tuple(tokens)
                if key in pool:
                    continue
                loss = ctx.loss(oracle, key)
                pool[key] = Beam(
                    prompt_tokens=key,
                    loss=loss,
                    history=beam.history + ((round_no, position, old, v),),
                )
    ranked = sorted(pool.values(), key=lambda b: (b.loss, b.prompt_tokens))
    return ranked[:beam_width]


def _feasible_move_exists(space: PromptSpace) -> bool:
    base = space.base_prompt_tokens
    for position in space.trigger_positions:
        base_e = space.embed(base[position])
        n_trig = len(space.trigger_positions)
        dist_other = 0.0
        for v in space.vocab:
            if v == base[position]:
                continue
            swap_dist = dist_other + float(np.linalg.norm(space.embed(v) - base_e)) / n_trig
            if swap_dist <= space.delta_bound + _TOL:
                return True
    return False


def optimize_prompt(
    image: ImageTensor,
    query_tokens: Sequence[int],
    y_true: Sequence[int],
    oracle: ScoringOracle,
    space: PromptSpace,
    cfg: OptimizeConfig,
) -> PromptRecord:
    """Minimize the oracle loss over the constrained trigger block.

    The image argument is expected to be a purified image (pipeline
    contract; not enforced here). Deterministic for a fixed config.
    """
    ctx = ScoringContext(
        query_tokens=tuple(int(t) for t in query_tokens),
        image=image,
        y_true=tuple(int(t) for t in y_true),
    )
    base = space.base_prompt_tokens
    base_loss = ctx.loss(oracle, base)
    beams = [Beam(prompt_tokens=base, loss=base_loss)]
    trace: list[dict] = [
        {"round": 0, "beam_rank": 0, "loss": base_loss, "tokens": list(base)}
    ]
    for rnd in range(1, cfg.rounds + 1):
        beams = beam_round(
            beams, oracle, space, cfg.beam_width, cfg.candidates_per_position, ctx, round_no=rnd
        )
        for rank, b in enumerate(beams):
            trace.append(
                {"round": rnd, "beam_rank": rank, "loss": b.loss, "tokens": list(b.prompt_tokens)}
            )
    if cfg.trace_path:
        path = Path(cfg.trace_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for row in trace:
                fh.write(json.dumps(row) + "\n")
    best = min(beams, key=lambda b: (b.loss, b.prompt_tokens))
    no_feasible = (
        cfg.rounds > 0
        and best.prompt_tokens == base
        and not _feasible_move_exists(space)
    )
    slack = space.delta_bound - space.dist(best.prompt_tokens)
    return PromptRecord(
        base=base,
        optimized=best.prompt_tokens,
        final_loss=best.loss,
        rounds=cfg.rounds,
        constraint_slack=max(slack, 0.0) if abs(slack) < _TOL else slack,
        no_feasible=no_feasible,
    )
