# utils/errors.py - Exception types shared by the library and the CLI


class LskError(Exception):
    """Base class for every error raised on purpose by this package."""


class ContractViolation(LskError, ValueError):
    """A precondition of an operation does not hold (exit code 2)."""


class FormatError(LskError):
    """A file or literal could not be parsed (exit code 3)."""


def require(condition, message):
    if not condition:
        raise ContractViolation(message)
