"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class DivergenceError(NumericalError):
    """The inner-loop state became non-finite while scanning a sequence."""

    def __init__(self, token_index, message=None):
        self.token_index = int(token_index)
        super().__init__(message or f"inner-loop state diverged at token {self.token_index}")


class DataError(ValueError):
    """Malformed interaction data."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValueError):
    """One or more configuration keys are invalid. ``problems`` lists all of them."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupted or of an unknown version."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint was written for a different model configuration."""
