"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value. The message names the offending field."""


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


class UsageError(RuntimeError):
    """An operation was called in a state that does not allow it."""


class NumericalError(FloatingPointError):
    def __init__(self, component: str, message: str = ""):
        self.component = component
        super().__init__(message or f"non-finite value in loss component '{component}'")


class ReportError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass
