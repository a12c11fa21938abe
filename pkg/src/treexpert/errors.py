"""Exception hierarchy shared by every module."""

from __future__ import annotations


class TreexpertError(Exception):
    """Base class for all package errors."""


class ConfigError(TreexpertError, ValueError):
    pass


class VocabularyError(TreexpertError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class CapacityError(TreexpertError, ValueError):
    """A tree does not fit in the role basis."""


class RoleLookupError(TreexpertError, LookupError):
    pass


class DecodeError(TreexpertError):
    """A tensor position is occupied but matches no vocabulary item, or the
    occupied positions do not form a binary tree."""


class ParseError(TreexpertError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProgramError(TreexpertError):
    """Invalid LispProgram (bad index or malformed cons)."""


class ShapeError(TreexpertError, ValueError):
    pass


class TapeConsumedError(TreexpertError, RuntimeError):
    pass


class NumericError(TreexpertError, FloatingPointError):
    pass


class GenerationError(TreexpertError):
    pass


class CheckpointError(TreexpertError):
    pass
