"""Exception types shared across the package."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument is outside the domain of the operation."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    The best iterate seen and its residual are kept so callers can still
    report something useful.
    """

    def __init__(self, message: str, best=None, residual: float = float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


class ParseError(ValueError):
    """A file could not be parsed. ``line`` or ``offset`` locate the problem."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (offset {offset})"
        super().__init__(message + where)
        self.line = line
        self.offset = offset


class ConsistencyError(ValueError):
    """Two inputs that must agree do not (e.g. image and label counts)."""
