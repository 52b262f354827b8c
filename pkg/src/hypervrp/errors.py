"""Exception types shared across the package.

Every error raised on a user-facing path is one of these (or a plain
ValueError for programming-level argument misuse), so the CLI can map
failure kinds to stable exit codes.
"""
from __future__ import annotations


class ParseError(ValueError):
    """A data file could not be parsed.

    Carries the 1-based line number where parsing failed (0 when the
    problem is not attributable to a single line, e.g. a missing section).
    """

    def __init__(self, message: str, line: int = 0):
        self.line = line
        if line:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(ValueError):
    """Operand shapes are incompatible for a tensor operation."""


class MalformedSolutionError(ValueError):
    """A visit sequence or route list violates the solution grammar."""


class CheckpointFormatError(ValueError):
    """A checkpoint file has the wrong magic, version, or layout."""


class TooLargeError(ValueError):
    """An instance exceeds a hard size limit (e.g. the exact oracle cap)."""


class ContractViolation(RuntimeError):
    """An internal invariant was broken; indicates a bug, not bad input."""
