"""Exception hierarchy shared by every module."""


class BifurcateError(Exception):
    """Base class for all library errors."""


class InputError(BifurcateError, ValueError):
    """Shapes, dimensions or values of an argument are invalid."""


class ConfigError(BifurcateError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DomainError(InputError):
    """An input lies outside a branch family's admissible domain."""


class LayoutError(InputError):
    """A parameter slice does not match the declared layout."""


class DivergenceError(BifurcateError, ArithmeticError):
    """A rollout produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StabilityError(DivergenceError):
    """A time stepper blew up; usually the step size is too large."""


class TrainingStepError(BifurcateError, ArithmeticError):
    """Loss or gradient was non-finite; the optimizer step was rejected."""


class TrainingAbortedError(BifurcateError, RuntimeError):
    """Every step of an epoch was rejected."""


class DatasetError(BifurcateError, RuntimeError):
    """Dataset construction or validation failed."""


class CalibrationError(BifurcateError, RuntimeError):
    """A search for a calibrated constant did not reach its target."""


class DependencyError(BifurcateError, RuntimeError):
    """A required upstream artifact is missing."""


class IntegrityError(BifurcateError, RuntimeError):
    """Stored artifacts do not match their recorded hashes."""
