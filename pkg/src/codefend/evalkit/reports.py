"""Report emission: grouped CSV/Markdown tables, side-effect deltas, and
per-sample similarity scatter plots."""

from __future__ import annotations

import csv
import warnings
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import EvalRecord
from .similarity import SimilarityTriple

CSV_HEADER = ["model", "attack", "method", "clip_score", "asr_pct", "vqa_acc_pct", "n"]


class IncompleteGrid(UserWarning):
    """The model x attack x method grid has missing cells."""


def aggregate_records(records: Sequence[EvalRecord]) -> dict[tuple[str, str, str], dict]:
    """Per-condition means: clip score, ASR%, VQA%, and count."""
    groups: dict[tuple[str, str, str], list[EvalRecord]] = {}
    for rec in records:
        groups.setdefault(rec.condition, []).append(rec)
    cells: dict[tuple[str, str, str], dict] = {}
    for cond, recs in groups.items():
        hits = [r.target_hit for r in recs]
        if any(h is not None for h in hits) and any(h is None for h in hits):
            raise ValueError(f"condition {cond}: mixed targeted/untargeted records")
        vqa = [r.vqa_correct for r in recs if r.vqa_correct is not None]
        cells[cond] = {
            "clip_score": float(np.mean([r.clip_score for r in recs])),
            "asr_pct": (
                100.0 * float(np.mean([int(h) for h in hits])) if hits[0] is not None else None
            ),
            "vqa_acc_pct": (100.0 * float(np.mean([int(v) for v in vqa])) if vqa else None),
            "n": len(recs),
        }
    return cells


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.2f}"


def format_cell(clip: float | None, asr_pct: float | None) -> str:
    """Markdown cell: "CLIP/ASR%" for targeted conditions, "CLIP" otherwise."""
    if clip is None:
        return "—"
    if asr_pct is None:
        return f"{clip:.2f}"
    return f"{clip:.2f}/{asr_pct:g}%"


def write_report_csv(cells: Mapping[tuple[str, str, str], dict], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for (model, attack, method) in sorted(cells):
            cell = cells[(model, attack, method)]
            writer.writerow(
                [
                    model,
                    attack,
                    method,
                    _fmt(cell["clip_score"]),
                    _fmt(cell["asr_pct"]),
                    _fmt(cell["vqa_acc_pct"]),
                    cell["n"],
                ]
            )


def parse_report_csv(path: Path | str) -> dict[tuple[str, str, str], dict]:
    cells: dict[tuple[str, str, str], dict] = {}
    with open(path, "r", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected report header: {reader.fieldnames}")
        for row in reader:
            cells[(row["model"], row["attack"], row["method"])] = {
                "clip_score": float(row["clip_score"]) if row["clip_score"] else None,
                "asr_pct": float(row["asr_pct"]) if row["asr_pct"] else None,
                "vqa_acc_pct": float(row["vqa_acc_pct"]) if row["vqa_acc_pct"] else None,
                "n": int(row["n"]),
            }
    return cells


def write_report_markdown(cells: Mapping[tuple[str, str, str], dict], path: Path | str) -> None:
    models = sorted({k[0] for k in cells})
    attacks = sorted({k[1] for k in cells})
    methods = sorted({k[2] for k in cells})
    missing = [
        (m, a, meth)
        for m in models
        for a in attacks
        for meth in methods
        if (m, a, meth) not in cells
    ]
    if missing:
        warnings.warn(f"{len(missing)} missing grid cells rendered as em dash", IncompleteGrid)
    lines = ["| Model | Attack | " + " | ".join(methods) + " |"]
    lines.append("|" + " --- |" * (2 + len(methods)))
    for m in models:
        for a in attacks:
            row = [m, a]
            for meth in methods:
                cell = cells.get((m, a, meth))
                if cell is None:
                    row.append("—")
                else:
                    row.append(format_cell(cell["clip_score"], cell["asr_pct"]))
            lines.append("| " + " | ".join(row) + " |")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_similarity_plots(
    rows: Sequence[tuple[str, SimilarityTriple]], out_dir: Path | str
) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xs = np.arange(len(rows))
    sims_np = [t.sim_noise_perturbation for _, t in rows]
    sims_po = [t.sim_purified_original for _, t in rows]
    sims_pa = [t.sim_purified_adversarial for _, t in rows]

    paths = []
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(xs, sims_np, s=12, color="tab:blue")
    ax.set_xlabel("sample")
    ax.set_ylabel("cosine(removed noise, adversarial perturbation)")
    ax.set_ylim(-1.05, 1.05)
    p = out_dir / "noise_vs_perturbation.png"
    fig.savefig(p, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(xs, sims_po, s=12, color="tab:green", label="purified vs original")
    ax.scatter(xs, sims_pa, s=12, color="tab:red", label="purified vs adversarial")
    ax.set_xlabel("sample")
    ax.set_ylabel("feature cosine")
    ax.set_ylim(-1.05, 1.05)
    ax.legend()
    p = out_dir / "feature_similarity.png"
    fig.savefig(p, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)
    return paths


def emit_report(
    records: Sequence[EvalRecord],
    out_dir: Path | str,
    similarities: Sequence[tuple[str, SimilarityTriple]] | None = None,
) -> dict[str, Path]:
    """Write report.csv + report.md (and scatter plots when similarity
    rows are provided); returns the emitted paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = aggregate_records(records)
    files: dict[str, Path] = {}
    csv_path = out_dir / "report.csv"
    write_report_csv(cells, csv_path)
    files["csv"] = csv_path
    md_path = out_dir / "report.md"
    write_report_markdown(cells, md_path)
    files["md"] = md_path
    if similarities:
        for p in write_similarity_plots(similarities, out_dir):
            files[p.stem] = p
    return files


def drop_pct(vanilla: float, score: float) -> float:
    return 100.0 * (vanilla - score) / vanilla


def side_effect_cell(vanilla: float, score: float) -> str:
    """Table cell "score (downarrow drop%)" relative to the Vanilla score."""
    return f"{score:.2f} (↓{drop_pct(vanilla, score):.2f}%)"


def side_effect_report(
    scores: Mapping[tuple[str, str], float],
    vanilla_method: str = "Vanilla",
) -> dict[tuple[str, str], str]:
    """Render mean clean-image caption scores with percentage drops.

    `scores` maps (model, method) to a mean CLIP score; every model must
    include the vanilla method, whose cell carries a 0.00% drop.
    """
    models = sorted({m for m, _ in scores})
    out: dict[tuple[str, str], str] = {}
    for model in models:
        if (model, vanilla_method) not in scores:
            raise ValueError(f"model {model!r} lacks a {vanilla_method!r} score")
        vanilla = scores[(model, vanilla_method)]
        for (m, method), score in scores.items():
            if m != model:
                continue
            out[(m, method)] = side_effect_cell(vanilla, score)
    return out


def write_side_effect_markdown(
    cells: Mapping[tuple[str, str], str], path: Path | str, vanilla_method: str = "Vanilla"
) -> None:
    models = sorted({m for m, _ in cells})
    methods = sorted({meth for _, meth in cells}, key=lambda s: (s != vanilla_method, s))
    lines = ["| Method | " + " | ".join(models) + " |", "|" + " --- |" * (1 + len(models))]
    for method in methods:
        row = [method] + [cells.get((m, method), "—") for m in models]
        lines.append("| " + " | ".join(row) + " |")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
