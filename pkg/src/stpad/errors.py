"""Exception hierarchy.

Every error carries a short machine-readable ``code`` that the command line
front end reports in its JSON error payload.
"""


class StpadError(Exception):
    code = "error"
    exit_code = 2

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ValidationError(StpadError, ValueError):
    code = "validation"


class ConfigurationError(StpadError, ValueError):
    code = "configuration"


class PreconditionError(StpadError, ValueError):
    code = "precondition"


class SimulationError(StpadError, RuntimeError):
    code = "simulation"
    exit_code = 3


class NumericalError(StpadError, RuntimeError):
    """Raised when training produces a non-finite loss."""

    code = "numerical"
    exit_code = 3


class SamplingError(NumericalError):
    code = "sampling"


class ContainerError(StpadError):
    code = "container"


class SchemaError(ContainerError):
    code = "schema"


class ShapeMismatchError(ContainerError):
    code = "shape_mismatch"


class TruncatedBlobError(ContainerError):
    code = "truncated_blob"


class CheckpointError(StpadError):
    code = "checkpoint"
