from typing import Any, Optional


class OdskdException(Exception):
    """
    An error occured inside odskd. The cause can be misconfiguration
    or a numerical failure during a run.
    This exception will cause the command line tool to exit with status 3 if unhandled.
    """

    name = "Error"
    exit_code = 3
    data: Optional[Any] = None

    def __init__(self, message: str = "", data: Optional[Any] = None):
        super().__init__(message)
        if data is not None:
            self.data = data

    def render(self) -> dict:
        data = {
            "error": self.name,
            "error_description": str(self),
        }
        if self.data is not None:
            data["error_details"] = self.data
        return data


class UsageError(OdskdException):
    """
    An operation was called in a way it does not support,
    e.g. backward from a non-scalar node or an empty list of ensemble members.

    This exception will cause exit status 2 if unhandled.
    """

    name = "UsageError"
    exit_code = 2


class ValidationError(UsageError):
    """
    Inputs do not satisfy the preconditions of an operation
    (e.g. labels that are not one-hot, nonpositive dataset sizes).
    """

    name = "ValidationError"


class ConfigurationError(UsageError):
    """
    The configuration is inconsistent, e.g. the number of teachers does not match
    the number of student subnetworks, or a config key is unknown.
    """

    name = "ConfigurationError"


class ShapeError(ValidationError, ValueError):
    """Array dimensions do not agree. The message names both shapes."""

    name = "ShapeError"


class DomainError(ValidationError, ValueError):
    """A scalar argument is outside of its domain (e.g. a temperature <= 0)."""

    name = "DomainError"


class MemberIndexError(UsageError, IndexError):
    """An ensemble member index is out of range."""

    name = "MemberIndexError"


class NumericalError(OdskdException):
    """
    A computation failed at runtime for numerical reasons.
    This exception will cause exit status 3 if unhandled.
    """

    name = "NumericalError"
    exit_code = 3


class DegenerateGradient(NumericalError):
    """
    A gradient that is normalized to a direction has (nearly) zero norm.
    If raised for a batch, :attr:`data` holds the indices of the offending rows.
    """

    name = "DegenerateGradient"
