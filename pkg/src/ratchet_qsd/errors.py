"""Exception hierarchy shared by every module."""
from __future__ import annotations


class RatchetError(Exception):
    """Base class for all toolkit errors."""


class InvalidProfile(RatchetError, ValueError):
    pass


class NegativeEntry(InvalidProfile):
    pass


class NotNormalized(InvalidProfile):
    pass


class InvalidK(RatchetError, ValueError):
    pass


class InvalidStart(RatchetError, ValueError):
    pass


class StepTooLarge(RatchetError):
    pass


class Extinct(RatchetError):
    """Every particle of an ensemble clicked."""


class StatisticalFloor(RatchetError):
    """Too few observations for the requested estimate."""


class WindowTooThin(StatisticalFloor):
    pass


class NoDecayWindow(StatisticalFloor):
    pass


class ParseError(RatchetError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        super().__init__(message)
        self.line = line
        self.field = field


class ValidationError(RatchetError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message
        self.line = None
