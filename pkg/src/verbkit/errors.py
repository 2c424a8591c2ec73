"""Exception hierarchy shared by every verbkit module."""


class VerbkitError(Exception):
    """Base class for all verbkit errors."""


class StructuralError(VerbkitError, ValueError):
    """A masked sequence violates its structure (MASK count, length)."""


class OOVError(VerbkitError, KeyError):
    """A word is missing from an embedding store."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(VerbkitError, ArithmeticError):
    """A computation would divide by zero or produce non-finite values."""


class ParseError(VerbkitError, ValueError):
    """A file or record could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class TrainingError(VerbkitError, RuntimeError):
    """Fine-tuning diverged (non-finite loss) or was misconfigured."""
