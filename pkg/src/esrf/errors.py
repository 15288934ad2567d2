class InputError(ValueError):
    """Invalid argument or data shape."""


class ParseError(InputError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ConfigError(ValueError):
    """Inconsistent or unreadable experiment configuration."""


class TrainingAborted(RuntimeError):
    """Raised when a loss becomes non-finite during training."""
