"""Exception hierarchy shared by every module, plus the CLI exit-code mapping."""

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ForecasterError(Exception):
    """Base class for all errors raised by traffic_forecaster."""

    exit_code = EXIT_UNEXPECTED


class ConfigError(ForecasterError, ValueError):
    """Invalid or inconsistent configuration (bad field, misordered dates, missing file)."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, field: str = None, path: str = None):
        self.field = field
        self.path = path
        parts = [message]
        if field:
            parts.append(f"field: {field}")
        if path:
            parts.append(f"path: {path}")
        super().__init__(" | ".join(parts))


class DataError(ForecasterError, ValueError):
    """Input data is malformed or insufficient for the requested operation."""

    exit_code = EXIT_DATA


class OutOfRangeError(DataError, IndexError):
    """Not enough history before an anchor index."""

    def __init__(self, message: str, earliest_index: int = None):
        self.earliest_index = earliest_index
        super().__init__(message)


class EmptyDatasetError(DataError):
    """A sample builder or fit produced / received no data."""


class InsufficientDataError(DataError):
    """The data covers less than the span an operation needs (e.g. one full week)."""


class NumericalError(ForecasterError, RuntimeError):
    """Non-finite loss or gradient encountered during training."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, batch_index: int = None):
        self.batch_index = batch_index
        super().__init__(message)


class DimensionError(ForecasterError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = EXIT_DATA


class TapeError(ForecasterError, RuntimeError):
    """Backward called on a non-scalar output or on a tensor that was not recorded."""

    exit_code = EXIT_NUMERICAL


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(exc, ForecasterError):
        return exc.exit_code
    if isinstance(exc, FileNotFoundError):
        return EXIT_CONFIG
    return EXIT_UNEXPECTED
