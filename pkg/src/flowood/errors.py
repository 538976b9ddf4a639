"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class FlowOODError(Exception):
    exit_code = 1


class ArgumentError(FlowOODError, ValueError):
    exit_code = 2


class StateError(FlowOODError, RuntimeError):
    """Operation called on an object that is not ready (unfitted, uninitialized)."""

    exit_code = 2


class RegistrationError(FlowOODError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(FlowOODError):
    """Malformed file: bad magic, wrong layout."""

    exit_code = 3


class CorruptionError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ValidationError(FormatError):
    """File parsed but the content violates a data invariant (e.g. non-finite values)."""


class NumericalError(FlowOODError, ArithmeticError):
    exit_code = 4


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
