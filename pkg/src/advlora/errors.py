"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on shapes or values was violated."""


class RankError(ContractError):
    pass


class InputError(ValueError):
    """Model inputs are malformed (non-finite, wrong width, bad labels)."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericalAbort(RuntimeError):
    """Training or a bench diverged; ``partial`` holds whatever was recorded."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DataFormatError(ValueError):
    """A data file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class InsufficientDataError(ValueError):
    pass
