"""
Exception hierarchy for vl-instruct.

Two families matter to callers: ``ConfigError`` (the run is misconfigured,
CLI exit code 2) and ``DataError`` (an input record or string is bad, CLI
exit code 1). Parse errors carry the UTF-8 byte offset of the problem.
"""

from __future__ import annotations

from typing import Optional, Sequence


def byte_offset(text: str, index: int) -> int:
    """Convert a character index into a UTF-8 byte offset within ``text``."""
    return len(text[:index].encode("utf-8"))


class VLInstructError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VLInstructError):
    """Invalid configuration, plan, registry entry or command-line usage."""


class RegistryError(ConfigError, ValueError):
    """An entry with the same name is already registered."""


class UnknownEntryError(ConfigError, KeyError):
    """Lookup of a name that is not registered."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class PlanError(ConfigError):
    """A stage plan failed validation; ``violations`` lists every problem."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class LexiconError(ConfigError):
    """CHAIR lexicon or gold object set is inconsistent."""


class DataError(VLInstructError):
    """Bad input data."""


class ValidationError(DataError, ValueError):
    """A value violates a type invariant."""


class OutOfRangeError(ValidationError):
    """A pixel coordinate lies outside the image."""

    def __init__(self, message: str, coordinate: str):
        self.coordinate = coordinate
        super().__init__(message)


class ParseError(DataError, ValueError):
    """Malformed text; ``offset`` is the UTF-8 byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class BoxSyntaxError(ParseError):
    """Text is not a ``{<a><b><c><d>}`` box group."""


class BoxRangeError(ParseError):
    """A box coordinate is outside [0, 100]."""


class BoxOrderError(ParseError):
    """A box has x_left > x_right or y_top > y_bottom."""


class TrailingDataError(ParseError):
    """Extra text after a complete box group."""


class PromptDelimiterError(ParseError):
    """Missing ``[INST]`` or ``[/INST]``."""


class ImageTagError(ParseError):
    """Unbalanced ``<Img>`` / ``</Img>`` tags."""


class UnknownIdentifierError(ParseError):
    """A bracketed token in identifier position is not a known task identifier."""


class UnclosedPhraseError(ParseError):
    """``<p>`` without a matching ``</p>``."""


class UnmatchedCloseError(ParseError):
    """``</p>`` without an opening ``<p>``."""


class NestedPhraseError(ParseError):
    """``<p>`` inside a phrase."""


class EmptyPhraseError(ParseError):
    """``<p></p>`` with nothing inside."""


class MissingBoxError(ParseError):
    """``<p>…</p>`` not followed by a box group."""


class SchemaError(DataError):
    """A JSONL record does not match its schema."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None and line is not None:
            location = f"{path}:{line}: "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")
