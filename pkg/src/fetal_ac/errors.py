"""Exception types raised across the pipeline."""


class FetalACError(Exception):
    """Base class for all package errors."""


class DimensionError(FetalACError, ValueError):
    """Array shapes are incompatible with a layer or operation."""


class StateError(FetalACError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class NumericError(FetalACError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParameterError(FetalACError, ValueError):
    """An argument is outside its admissible range."""


class InputError(FetalACError, ValueError):
    """A sample or image violates its invariants."""


class UndefinedDirectionError(InputError):
    """Propagation direction requested at the probe origin itself."""


class EmptyRegionError(FetalACError):
    """The semantic map has no amniotic-fluid pixels to fit."""

    code = "no-AF-region"


class NoCandidateError(FetalACError):
    """Every ellipse candidate was rejected (or none was generated)."""

    code = "no-candidate"


class ConfigError(FetalACError, ValueError):
    """Unknown keys or inconsistent values in a configuration."""


class FormatError(FetalACError, ValueError):
    """A file on disk does not follow the expected format."""
