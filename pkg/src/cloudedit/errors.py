"""Exception types shared across the package."""

from __future__ import annotations


class CloudEditError(Exception):
    """Base class for all package errors."""


class EmptyCloudError(CloudEditError):
    pass


class DegenerateCloudError(CloudEditError):
    """Cloud cannot be normalized (all points coincide or non-finite)."""


class LengthMismatchError(CloudEditError):
    pass


class EmptyRegionError(CloudEditError):
    """A mask selects no points where some are required."""


class ShapeMismatchError(CloudEditError):
    pass


class InvalidParamsError(CloudEditError):
    pass


class InvalidEditError(CloudEditError):
    pass


class UnknownTokenError(CloudEditError):
    pass


class TokenizeError(CloudEditError):
    pass


class UnknownCategoryError(CloudEditError):
    pass


class InvalidTError(CloudEditError):
    pass


class BadStepError(CloudEditError):
    pass


class DivergedError(CloudEditError):
    """Training loss became non-finite."""


class TooFewSamplesError(CloudEditError):
    pass


class TooFewPointsError(CloudEditError):
    pass


class ZeroDeltaError(CloudEditError):
    """A difference vector is too small to define a direction."""


class FormatError(CloudEditError):
    """Malformed binary file (bad magic, flags, or truncation)."""
