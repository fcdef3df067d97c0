"""Exception hierarchy shared by the services and the CLI.

Every error carries the process exit code the CLI should use when the error
reaches the command boundary:

- 2: input problems (bad files, bad arguments, missing artifacts)
- 3: numerical failure (training diverged)
"""


class CagpError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class InvalidInputError(CagpError):
    """Raised when an argument or input file violates an operation's contract."""

    exit_code = 2


class GraphParseError(InvalidInputError):
    """Raised when a triple file contains a malformed line."""

    def __init__(self, message: str, path: str = "", line_number: int = 0):
        super().__init__(f"{path}:{line_number}: {message}" if path else message)
        self.path = path
        self.line_number = line_number


class ArtifactMissingError(InvalidInputError):
    """Raised when a required file or prepared artifact does not exist."""


class CheckpointFormatError(InvalidInputError):
    """Raised when a checkpoint container cannot be decoded."""


class UndefinedMetricError(CagpError):
    """Raised when a metric is undefined for its input (e.g. a single class)."""

    exit_code = 0


class TrainingDivergedError(CagpError):
    """Raised when the training loss becomes non-finite."""

    exit_code = 3

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step
