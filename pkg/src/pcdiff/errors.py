"""Exception types raised across the package."""


class PcdiffError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PcdiffError, ValueError):
    pass


class FrustumViolationError(InvalidInputError):
    def __init__(self, message, indices):
        super().__init__(f"{message}: {len(indices)} offending point(s), first {list(indices[:10])}")
        self.indices = indices


class DegenerateDataError(InvalidInputError):
    pass


class SizeError(InvalidInputError):
    pass


class DomainError(InvalidInputError):
    pass


class UsageError(PcdiffError):
    pass


class StructuralError(PcdiffError):
    """Mismatched shapes between containers that must agree."""


class NumericalFailure(PcdiffError, FloatingPointError):
    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class TrainingDivergence(NumericalFailure):
    pass


class SamplerDivergence(NumericalFailure):
    pass


class AlignmentFailure(PcdiffError):
    pass


class FormatError(PcdiffError):
    pass


class MagicMismatch(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ShapeMismatch(FormatError, StructuralError):
    pass
