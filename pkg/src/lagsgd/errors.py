"""Shared exception types."""


class StructureError(ValueError):
    """Layer layouts disagree or a structural input is malformed."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite quantity."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(ValueError):
    """An experiment config is missing or misusing keys."""

    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = keys or []


class ScenarioError(ValueError):
    """A scenario file failed to parse."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(RuntimeError):
    """A stored run artifact is missing, corrupt, or inconsistent."""
