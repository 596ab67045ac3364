"""Shared exception types with CLI exit-code mapping."""


class FewshotError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(FewshotError):
    """Invalid configuration value or unknown config key."""

    exit_code = 1


class DataError(FewshotError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class SamplingError(DataError):
    """Corpus cannot satisfy an episode sampling request."""


class ShapeError(FewshotError):
    """Tensor shapes incompatible with the requested operation."""

    exit_code = 1


class NumericalError(FewshotError):
    """Non-finite value encountered where a finite one is required."""

    exit_code = 3
