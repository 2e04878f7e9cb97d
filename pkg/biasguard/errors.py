"""Exception hierarchy."""
from typing import Any, Optional


class BiasGuardError(Exception):
    """Base class for every engine error."""


class ContractViolation(BiasGuardError, ValueError):
    """A precondition of an operation does not hold."""


class DimensionError(ContractViolation):
    """Shapes or dimensions disagree."""


class NumericalFailure(BiasGuardError, ArithmeticError):
    """A computation produced a non-finite value or could not be completed."""

    def __init__(self, message: str, primitive: Optional[str] = None):
        super().__init__(message)
        self.primitive = primitive


class TrainingAborted(NumericalFailure):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, last_good: Any = None, primitive: Optional[str] = None):
        super().__init__(message, primitive=primitive)
        self.last_good = last_good


class DataFormatError(BiasGuardError):
    """A data or artifact file could not be parsed."""

    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DimensionInconsistencyError(DataFormatError):
    """Rows disagree on feature dimensions."""


class UnknownClassError(DataFormatError):
    """A class id is missing from, or unknown to, the split manifest."""


class SemanticMismatchError(DataFormatError):
    """Records of one class carry different semantic vectors."""

    def __init__(self, message: str, class_id: Optional[int] = None, row: Optional[int] = None):
        super().__init__(message, row=row)
        self.class_id = class_id


class CheckpointFormatError(DataFormatError):
    """A binary container is malformed."""


class BadMagicError(CheckpointFormatError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(CheckpointFormatError):
    """The container version is not supported."""


class TruncatedFileError(CheckpointFormatError):
    """The file ended before the declared content."""
