"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: usage errors exit 1, data/format
errors exit 2, numerical failures exit 3.
"""


class OODBridgeError(Exception):
    """Base class for every error raised by this package."""


class InvalidSpecError(OODBridgeError, ValueError):
    """Unknown corruption family, bad severity or malformed parameters."""


class ShapeError(OODBridgeError, ValueError):
    """Array has the wrong shape or dtype for the operation."""


class FormatError(OODBridgeError, ValueError):
    """A file or record does not follow its declared format."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class TruncatedError(FormatError):
    """Binary payload ends before the header says it should."""


class CompletenessError(FormatError):
    """An accuracy table is missing one or more corruption specs."""


class NumericalError(OODBridgeError, ArithmeticError):
    """Non-finite loss, non-normalized probabilities and similar failures."""
