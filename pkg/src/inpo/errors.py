"""Exception types shared across the package."""


class InpoError(Exception):
    """Base class for all package errors."""


class InvalidArgument(InpoError, ValueError):
    """A caller violated an operation precondition."""


class NumericError(InpoError, ArithmeticError):
    """A computation produced a non-finite value.

    The message names the offending term or step index.
    """


class TrainingError(NumericError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class PairParseError(InpoError, ValueError):
    """A preference-pair file line failed to parse."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class VersionError(InpoError, ValueError):
    """A file header does not match the expected format or schema version."""


class ConfigError(InpoError, ValueError):
    """A configuration key is unknown, malformed, or inconsistent."""
