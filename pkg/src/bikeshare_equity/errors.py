"""Exception types shared across the pipeline."""

from __future__ import annotations


class BikeshareEquityError(Exception):
    """Base class for every error raised by this package."""


class TransportError(BikeshareEquityError):
    """A catalog or feed source could not be fetched."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class SchemaError(BikeshareEquityError):
    """A document was readable but its structure violates the expected schema."""


class ParseError(BikeshareEquityError):
    """A document could not be decoded at all."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class StorageError(BikeshareEquityError):
    """The snapshot store could not be written or read."""


class SnapshotNotFoundError(BikeshareEquityError):
    """No snapshot matches the requested selector."""


class GeometryError(BikeshareEquityError):
    """A boundary ring violates the polygon invariants."""


class ScalingError(BikeshareEquityError):
    """A predictor cannot be min-max scaled."""


class EmptyFrameError(BikeshareEquityError):
    """No tract records are available to build a model frame from."""


class SingularDesignError(BikeshareEquityError):
    """The design matrix is rank deficient."""

    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class NumericOverflowError(BikeshareEquityError):
    """A linear predictor or its exponential left the finite range."""


class DegenerateInferenceError(BikeshareEquityError):
    """Wald inference is undefined (zero or non-finite standard error)."""


class StageError(BikeshareEquityError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage
