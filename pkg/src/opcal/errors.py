"""Exception hierarchy shared across the toolkit.

ValidationError covers malformed inputs and user mistakes (CLI exit code 1);
NumericalError covers internal numerical failures such as an exhausted
jitter escalation (CLI exit code 2).
"""


class OpcalError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(OpcalError, ValueError):
    """Invalid input data, file format, or configuration."""


class NumericalError(OpcalError, ArithmeticError):
    """A numerical routine failed beyond recovery (e.g. conditioning)."""
