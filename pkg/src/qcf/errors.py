class QCFError(Exception):
    """Base class for estimation errors."""


class InputError(QCFError, ValueError):
    """Malformed or inconsistent input data."""


class DegenerateEstimationError(QCFError):
    """An estimation step could not identify its target (e.g. index direction)."""
