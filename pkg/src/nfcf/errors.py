"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes. The message names both shapes."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ParseError(ValueError):
    """Malformed input data file."""

    def __init__(self, message: str, path: str = "", line: int = 0):
        self.path = path
        self.line = line
        if path or line:
            message = f"{path}:{line}: {message}"
        super().__init__(message)


class DegenerateDirectionError(ValueError):
    """Group means coincide, so no bias direction exists."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, truncated, or not in the expected format."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""
