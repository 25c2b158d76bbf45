"""Exception types shared across the package, mapped to CLI exit codes."""


class PhenotensorError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(PhenotensorError):
    """Malformed, missing, or inconsistent input data or configuration."""

    exit_code = 1


class NumericalError(PhenotensorError):
    """Optimization or inference produced a non-finite or invalid quantity."""

    exit_code = 2


class DegenerateEvaluationError(PhenotensorError):
    """Evaluation is impossible, e.g. a cross-validation fold with one class."""

    exit_code = 3
