"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation-type errors exit with 3,
numerical failures with 4.
"""


class PrevOpfError(Exception):
    """Base class for package errors."""


class ValidationError(PrevOpfError, ValueError):
    """Input is well-formed but violates a model invariant."""


class CaseFormatError(PrevOpfError, ValueError):
    """A case file could not be parsed.

    ``line`` and ``field`` locate the problem when known.
    """

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NetworkValidationError(ValidationError):
    """The network violates a structural invariant (slack, connectivity, ...)."""


class SingularNetworkError(NetworkValidationError):
    """The reduced susceptance matrix cannot be factorized."""


class CalibrationError(ValidationError):
    """A calibration plan is incompatible with the network it is applied to."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message)


class HashMismatchError(ValidationError):
    """An artifact was produced for a different network."""


class ArtifactFormatError(ValidationError):
    """A dataset or model file is corrupted or has an unsupported version."""


class NumericalError(PrevOpfError, ArithmeticError):
    """Base class for numerical failures."""


class DatasetGenerationError(NumericalError):
    """Too many sampled instances were infeasible under the calibrated limits."""


class TrainingDivergedError(NumericalError):
    """The training loss became non-finite."""
