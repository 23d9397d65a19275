"""Exception types shared across the package."""


class FwdError(Exception):
    """Base class for all package errors."""


class ShapeError(FwdError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(FwdError, ValueError):
    """Numeric input outside the mathematical domain of an op."""


class FormatError(FwdError, ValueError):
    """A file or message does not match its declared format."""


class IoError(FwdError, OSError):
    """A referenced path is missing or unreadable."""


class MissingDepthError(FwdError, ValueError):
    """A depth-requiring variant was given a scene without depth maps."""


class EmptyInputError(FwdError, ValueError):
    """An operation received an empty collection where data is required."""


class NotFittedError(FwdError, RuntimeError):
    """An estimator method requiring a fitted model was called before fit."""


class TrainingDivergedError(FwdError, RuntimeError):
    """Loss became non-finite during training.

    Carries the step index at which divergence was detected.
    """

    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"training diverged at step {self.step}")
