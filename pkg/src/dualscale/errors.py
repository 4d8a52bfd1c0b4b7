"""Exception types shared across the package."""


class DualScaleError(Exception):
    """Base class for all package errors."""


class ShapeError(DualScaleError, ValueError):
    """Operand extents are incompatible."""


class ParameterError(DualScaleError, ValueError):
    """A scalar/config parameter is outside its valid range."""


class ConfigurationError(DualScaleError, ValueError):
    """A model or run configuration is inconsistent."""


class ContractError(DualScaleError, ValueError):
    """A call violates an API precondition (e.g. backward on a non-scalar)."""


class StateError(DualScaleError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class FormatError(DualScaleError, ValueError):
    """A binary file does not match the expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalBlowup(DualScaleError, ArithmeticError):
    """The solver produced non-finite or runaway values.

    ``last_state`` holds the last finite vorticity array and ``step`` the
    index of the step that failed.
    """

    def __init__(self, message, step=None, stage=None, last_state=None):
        super().__init__(message)
        self.step = step
        self.stage = stage
        self.last_state = last_state


class TrainingDiverged(DualScaleError, ArithmeticError):
    """Loss became non-finite during training."""

    def __init__(self, message, step, epoch, last_params=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.last_params = last_params


class RolloutTruncated(DualScaleError, ArithmeticError):
    """An autoregressive rollout produced a non-finite frame."""

    def __init__(self, message, step, frames=None):
        super().__init__(message)
        self.step = step
        self.frames = frames
