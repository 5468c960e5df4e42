"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it
should produce when it escapes a subcommand.
"""


class SuperMeshingError(Exception):
    exit_code = 1


class ConfigurationError(SuperMeshingError, ValueError):
    """Invalid shapes, sizes or hyperparameters."""

    exit_code = 2


class ParameterError(ConfigurationError):
    """Invalid generator parameters (hole too big, indivisible sizes, ...)."""


class InvariantError(SuperMeshingError, RuntimeError):
    """A runtime contract was broken (missing gradient, unfrozen extractor)."""

    exit_code = 4


class DataError(SuperMeshingError, ValueError):
    """Non-finite values, negative probabilities and similar data faults."""

    exit_code = 3


class FormatError(SuperMeshingError, ValueError):
    """Malformed dataset/checkpoint container."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SuperMeshingError, ArithmeticError):
    """Iterative solver failed to converge."""

    exit_code = 4

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class TrainingError(SuperMeshingError, RuntimeError):
    """Training diverged. ``checkpoint`` holds the last good state, if any."""

    exit_code = 4

    def __init__(self, message, epoch=None, checkpoint=None, record=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint
        self.record = record
