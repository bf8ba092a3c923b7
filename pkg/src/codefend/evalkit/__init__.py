from .metrics import (
    EvalRecord,
    VisionTextEncoder,
    asr,
    clip_score,
    normalize_answer,
    target_hit,
    vqa_accuracy,
    vqa_answer_correct,
)
from .reports import (
    CSV_HEADER,
    IncompleteGrid,
    aggregate_records,
    drop_pct,
    emit_report,
    format_cell,
    parse_report_csv,
    side_effect_cell,
    side_effect_report,
    write_report_csv,
    write_report_markdown,
    write_side_effect_markdown,
    write_similarity_plots,
)
from .similarity import SimilarityTriple, feature_similarity, write_similarity_dump

__all__ = [
    "CSV_HEADER",
    "EvalRecord",
    "IncompleteGrid",
    "SimilarityTriple",
    "VisionTextEncoder",
    "aggregate_records",
    "asr",
    "clip_score",
    "drop_pct",
    "emit_report",
    "feature_similarity",
    "format_cell",
    "normalize_answer",
    "parse_report_csv",
    "side_effect_cell",
    "side_effect_report",
    "target_hit",
    "vqa_accuracy",
    "vqa_answer_correct",
    "write_report_csv",
    "write_report_markdown",
    "write_side_effect_markdown",
    "write_similarity_dump",
    "write_similarity_plots",
]
