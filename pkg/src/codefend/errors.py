"""Exception taxonomy shared across the toolkit.

Every domain error derives from CodefendError so callers can catch the
whole family; the CLI maps CodefendError to exit code 1 and usage
problems to exit code 2.
"""


class CodefendError(Exception):
    """Base class for all domain errors."""


class MissingFile(CodefendError):
    pass


class SchemaError(CodefendError):
    """Malformed manifest/config record; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DanglingRef(CodefendError):
    pass


class DegenerateSplit(CodefendError):
    pass


class IoError(CodefendError):
    pass


class OracleFailure(CodefendError):
    pass


class ShapeMismatch(CodefendError):
    pass


class StepOutOfRange(CodefendError):
    pass


class EmptySplit(CodefendError):
    pass


class NonFiniteLoss(CodefendError):
    pass


class CheckpointCorrupt(CodefendError):
    pass


class SamplerDiverged(CodefendError):
    pass


class PositionNotMutable(CodefendError):
    pass


class AlignmentError(CodefendError):
    pass


class EmptyPrefix(CodefendError):
    pass


class RankTooLarge(CodefendError):
    pass


class EmptyDataset(CodefendError):
    pass


class EncoderFailure(CodefendError):
    pass


class UntargetedItem(CodefendError):
    pass


class LengthMismatch(CodefendError):
    pass


class StageFailure(CodefendError):
    """A defense-pipeline stage failed; `stage` is one of purify|prefix|vlm."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage} stage failed: {cause}")
