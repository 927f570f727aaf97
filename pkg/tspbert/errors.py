"""Exception hierarchy. Each error carries the exit status the CLI returns for it."""


class TspError(Exception):
    """Base class for every error raised by tspbert."""

    exit_code = 1


class ConfigError(TspError):
    """Invalid machine configuration, model hyper-parameters or command-line options."""

    exit_code = 2


class ScheduleConflictError(TspError):
    """The scheduler could not place work, or a schedule failed validation."""

    exit_code = 3

    def __init__(self, message, conflicts=()):
        super().__init__(message)
        self.conflicts = list(conflicts)


class HazardError(TspError):
    """Runtime hazard detected while simulating a schedule."""

    exit_code = 4

    def __init__(self, message, cycle=None, units=()):
        super().__init__(message)
        self.cycle = cycle
        self.units = tuple(units)


class OracleMismatchError(TspError):
    """Simulated tensors differ from the reference model."""

    exit_code = 5


class TensorFormatError(TspError):
    """Malformed tensor or report file."""

    exit_code = 6


class NumericError(TspError, ValueError):
    """Non-finite values, bad scales, accumulator overflow or empty reductions."""

    exit_code = 7
