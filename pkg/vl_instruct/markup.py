"""
Grounded-caption markup: ``<p>phrase</p>{<a><b><c><d>}`` spans in plain text.

A phrase may be followed by several box groups written back to back when it
refers to more than one object. Parsing is lossless: emitting the parsed
segments reproduces the source exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Tuple, Union

from vl_instruct.errors import (
    EmptyPhraseError,
    MissingBoxError,
    NestedPhraseError,
    ParseError,
    UnclosedPhraseError,
    UnmatchedCloseError,
    ValidationError,
    byte_offset,
)
from vl_instruct.geometry import NormBox, scan_box, serialize_box

P_OPEN = "<p>"
P_CLOSE = "</p>"
_BOX_START = "{<"


@dataclass(frozen=True)
class PlainText:
    text: str

    @property
    def surface(self) -> str:
        return self.text


@dataclass(frozen=True)
class GroundedSpan:
    """A phrase and the boxes it refers to; ``char_range`` is its source slice."""

    phrase: str
    boxes: Tuple[NormBox, ...]
    char_range: Tuple[int, int] = field(default=(0, 0), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.phrase:
            raise ValidationError("grounded phrase must be non-empty")
        if P_OPEN in self.phrase or P_CLOSE in self.phrase:
            raise ValidationError("grounded phrase may not contain <p> or </p>")
        if not self.boxes:
            raise ValidationError(f"phrase {self.phrase!r} needs at least one box")
        for box in self.boxes:
            if not isinstance(box, NormBox):
                raise ValidationError(f"expected NormBox, got {box!r}")

    @property
    def surface(self) -> str:
        return P_OPEN + self.phrase + P_CLOSE + "".join(serialize_box(b) for b in self.boxes)


Segment = Union[PlainText, GroundedSpan]


@dataclass(frozen=True)
class GroundedText:
    """
    Plain and grounded segments in document order.

    Adjacent plain segments are merged and empty ones dropped, matching what
    parse_grounded produces for the emitted text.

    Raises:
        ValidationError: A plain segment right after a span starts with ``{<``
    """

    segments: Tuple[Segment, ...] = ()

    def __post_init__(self) -> None:
        segments: List[Segment] = []
        for seg in self.segments:
            if isinstance(seg, PlainText):
                if not seg.text:
                    continue
                if segments and isinstance(segments[-1], PlainText):
                    segments[-1] = PlainText(segments[-1].text + seg.text)
                    continue
            elif not isinstance(seg, GroundedSpan):
                raise ValidationError(f"expected PlainText or GroundedSpan, got {seg!r}")
            segments.append(seg)
        for i in range(1, len(segments)):
            seg = segments[i]
            if not (isinstance(seg, PlainText) and isinstance(segments[i - 1], GroundedSpan)):
                continue
            following = segments[i + 1].surface if i + 1 < len(segments) else ""
            if (seg.text + following).startswith(_BOX_START):
                raise ValidationError(
                    f"plain text after a span may not start with {_BOX_START!r}"
                )
        object.__setattr__(self, "segments", tuple(segments))

    @property
    def spans(self) -> List[GroundedSpan]:
        return [seg for seg in self.segments if isinstance(seg, GroundedSpan)]


def parse_grounded(s: str) -> GroundedText:
    """
    Split text into plain segments and grounded spans.

    Raises:
        UnclosedPhraseError, UnmatchedCloseError, NestedPhraseError,
        EmptyPhraseError, MissingBoxError: Markup problems, with byte offsets
        ParseError: Malformed box groups, from geometry
    """
    segments: List[Segment] = []
    pos = 0
    while True:
        open_at = s.find(P_OPEN, pos)
        close_at = s.find(P_CLOSE, pos)
        if close_at != -1 and (open_at == -1 or close_at < open_at):
            raise UnmatchedCloseError("</p> without <p>", byte_offset(s, close_at))
        if open_at == -1:
            break

        if open_at > pos:
            segments.append(PlainText(s[pos:open_at]))
        phrase_start = open_at + len(P_OPEN)
        close_at = s.find(P_CLOSE, phrase_start)
        if close_at == -1:
            raise UnclosedPhraseError("<p> without </p>", byte_offset(s, open_at))
        nested = s.find(P_OPEN, phrase_start, close_at)
        if nested != -1:
            raise NestedPhraseError("<p> inside a phrase", byte_offset(s, nested))
        if close_at == phrase_start:
            raise EmptyPhraseError("empty phrase", byte_offset(s, open_at))

        pos = close_at + len(P_CLOSE)
        if not s.startswith("{", pos):
            raise MissingBoxError("phrase is not followed by a box", byte_offset(s, pos))
        boxes = []
        box, pos = scan_box(s, pos)
        boxes.append(box)
        while s.startswith(_BOX_START, pos):
            box, pos = scan_box(s, pos)
            boxes.append(box)
        segments.append(GroundedSpan(s[phrase_start:close_at], tuple(boxes), (open_at, pos)))

    if pos < len(s):
        segments.append(PlainText(s[pos:]))
    return GroundedText(tuple(segments))


def parse_grounded_lenient(s: str) -> GroundedText:
    """Scorer mode: malformed markup becomes a single plain segment with no spans."""
    try:
        return parse_grounded(s)
    except ParseError:
        return GroundedText((PlainText(s),) if s else ())


def emit_grounded(g: GroundedText) -> str:
    return "".join(seg.surface for seg in g.segments)


def strip_grounding(g: GroundedText) -> str:
    """Plain text with each span reduced to its phrase."""
    return "".join(
        seg.phrase if isinstance(seg, GroundedSpan) else seg.text for seg in g.segments
    )


def extract_pairs(g: GroundedText) -> List[Tuple[str, NormBox]]:
    """``(phrase, box)`` pairs in document order; a k-box span yields k pairs."""
    return [(span.phrase, box) for span in g.spans for box in span.boxes]


def count_spans(g: GroundedText) -> int:
    return len(g.spans)


def grounded_from_pairs(pairs: Iterable[Tuple[str, Iterable[NormBox]]]) -> GroundedText:
    """Build span-only markup, one span per ``(phrase, boxes)`` entry."""
    return GroundedText(tuple(GroundedSpan(phrase, tuple(boxes)) for phrase, boxes in pairs))
