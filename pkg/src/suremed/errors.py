"""Exception types raised across the package."""

from __future__ import annotations


class SureError(Exception):
    """Base class for every error raised by suremed."""


class InvalidLabelCode(SureError, ValueError):
    def __init__(self, index: int, value: object):
        self.index = index
        self.value = value
        super().__init__(f"label code {value!r} at index {index} is not in {{-1, 0, 1, 2}}")


class ShapeMismatch(SureError, ValueError):
    pass


class NoUsableViews(SureError):
    def __init__(self, study_id: str):
        self.study_id = study_id
        super().__init__(f"study {study_id}: every image was excluded by view repair")


class EmptyContext(SureError, ValueError):
    pass


class MissingFrontal(SureError):
    pass


class NumericalFailure(SureError, ArithmeticError):
    def __init__(self, location: str):
        self.location = location
        super().__init__(f"non-finite value in {location}")


class MissingLabels(SureError):
    def __init__(self, study_id: str):
        self.study_id = study_id
        super().__init__(f"study {study_id}: report has no per-sentence label vectors")


class EmptyWeightSet(SureError, ValueError):
    pass


class AlignmentError(SureError, ValueError):
    pass


class ZeroVector(SureError, ValueError):
    pass


class TrainingDiverged(SureError, ArithmeticError):
    pass


class FormatError(SureError, ValueError):
    pass


class TruncationError(FormatError):
    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"payload truncated: expected {expected} bytes, got {actual}")


class ParseError(SureError, ValueError):
    """A single corpus line that failed to parse; ``cause`` keeps the original error."""

    def __init__(self, line_no: int, message: str, cause: Exception | None = None):
        self.line_no = line_no
        self.cause = cause
        super().__init__(f"line {line_no}: {message}")


class CorpusRejected(SureError):
    def __init__(self, n_bad: int, n_total: int, errors: list[ParseError]):
        self.n_bad = n_bad
        self.n_total = n_total
        self.errors = errors
        super().__init__(f"{n_bad} of {n_total} corpus lines failed to parse (limit is 10%)")


class ConfigError(SureError, ValueError):
    pass
