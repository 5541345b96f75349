"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, validation and
configuration problems exit 2, numerical failures exit 3.
"""


class HoiPromptError(Exception):
    """Base class for all package errors."""


class ValidationError(HoiPromptError, ValueError):
    """Rejected input: malformed geometry, schema violations, shape mismatches."""


class ParseError(ValidationError):
    """A structured input file failed to parse; carries the offending line."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")
        self.path = path
        self.line = line


class ConfigError(HoiPromptError, ValueError):
    """Infeasible or out-of-range configuration."""


class GenerationError(HoiPromptError, RuntimeError):
    """Synthetic scene construction could not satisfy its constraints."""


class NumericalError(HoiPromptError, RuntimeError):
    """Training or scoring produced non-finite values."""
