"""
Bounding boxes in pixel space and on the normalized [0, 100] integer grid.

The textual box form ``{<a><b><c><d>}`` is the wire format shared by the
markup, corpus and metrics modules. Parsing is strict: anything that is not
exactly what ``serialize_box`` would emit is rejected with a byte offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from numbers import Real
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from vl_instruct.errors import (
    BoxOrderError,
    BoxRangeError,
    BoxSyntaxError,
    OutOfRangeError,
    ParseError,
    TrailingDataError,
    ValidationError,
    byte_offset,
)

GRID_MAX = 100

_FIELDS = ("x_left", "y_top", "x_right", "y_bottom")
_DIGITS = frozenset("0123456789")


class RoundingMode(str, Enum):
    """How pixel coordinates are quantised onto the grid."""

    HALF_UP = "half_up"
    FLOOR = "floor"
    CEIL = "ceil"


_ROUNDERS: Dict[RoundingMode, Callable[[Fraction], int]] = {
    RoundingMode.HALF_UP: lambda value: math.floor(value + Fraction(1, 2)),
    RoundingMode.FLOOR: math.floor,
    RoundingMode.CEIL: math.ceil,
}


def _is_int(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


@dataclass(frozen=True)
class PixelBox:
    """A box in pixel coordinates. Image size travels separately."""

    x_left: Real
    y_top: Real
    x_right: Real
    y_bottom: Real

    def __post_init__(self) -> None:
        for name in _FIELDS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, Real):
                raise ValidationError(f"{name} must be a real number, got {value!r}")
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be finite and non-negative, got {value}")
        if self.x_left > self.x_right:
            raise ValidationError(f"x_left {self.x_left} > x_right {self.x_right}")
        if self.y_top > self.y_bottom:
            raise ValidationError(f"y_top {self.y_top} > y_bottom {self.y_bottom}")

    def as_tuple(self) -> Tuple[Real, Real, Real, Real]:
        return (self.x_left, self.y_top, self.x_right, self.y_bottom)


@dataclass(frozen=True)
class NormBox:
    """A box with integer corners on the [0, 100] grid."""

    x_left: int
    y_top: int
    x_right: int
    y_bottom: int

    def __post_init__(self) -> None:
        for name in _FIELDS:
            value = getattr(self, name)
            if not _is_int(value):
                raise ValidationError(f"{name} must be an integer, got {value!r}")
            if not 0 <= value <= GRID_MAX:
                raise ValidationError(f"{name}={value} outside [0, {GRID_MAX}]")
        if self.x_left > self.x_right:
            raise ValidationError(f"x_left {self.x_left} > x_right {self.x_right}")
        if self.y_top > self.y_bottom:
            raise ValidationError(f"y_top {self.y_top} > y_bottom {self.y_bottom}")

    @classmethod
    def from_sequence(cls, values: Sequence[int]) -> NormBox:
        if not isinstance(values, (list, tuple)):
            raise ValidationError(f"a box must be a list of 4 coordinates, got {values!r}")
        if len(values) != 4:
            raise ValidationError(f"a box needs 4 coordinates, got {len(values)}")
        return cls(*values)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x_left, self.y_top, self.x_right, self.y_bottom)

    @property
    def area(self) -> int:
        return (self.x_right - self.x_left) * (self.y_bottom - self.y_top)

    @property
    def is_degenerate(self) -> bool:
        return self.area == 0


def normalize_box(
    b: PixelBox,
    width: int,
    height: int,
    rounding: Union[RoundingMode, str] = RoundingMode.HALF_UP,
) -> NormBox:
    """
    Quantise a pixel box onto the [0, 100] grid.

    Each coordinate becomes ``round(coord / dim * 100)`` computed in exact
    rational arithmetic, then clamped to [0, 100].

    Args:
        b: Box in pixel coordinates
        width: Image width in pixels
        height: Image height in pixels
        rounding: Rounding mode, half-up by default

    Returns:
        The normalized box

    Raises:
        OutOfRangeError: If a coordinate lies outside the image
        ValidationError: If width or height is not a positive integer
    """
    for name, dim in (("width", width), ("height", height)):
        if not _is_int(dim) or dim < 1:
            raise ValidationError(f"{name} must be a positive integer, got {dim!r}")

    round_fn = _ROUNDERS[RoundingMode(rounding)]
    dims = (width, height, width, height)
    values = []
    for name, value, dim in zip(_FIELDS, b.as_tuple(), dims):
        if value > dim:
            raise OutOfRangeError(f"{name}={value} outside image bounds [0, {dim}]", name)
        scaled = Fraction(value) * GRID_MAX / dim
        values.append(min(GRID_MAX, max(0, round_fn(scaled))))

    x0, y0, x1, y1 = values
    return NormBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


def denormalize_box(n: NormBox, width: int, height: int) -> PixelBox:
    """Map a grid box back to exact (rational) pixel coordinates."""
    for name, dim in (("width", width), ("height", height)):
        if not _is_int(dim) or dim < 1:
            raise ValidationError(f"{name} must be a positive integer, got {dim!r}")
    return PixelBox(
        Fraction(n.x_left * width, GRID_MAX),
        Fraction(n.y_top * height, GRID_MAX),
        Fraction(n.x_right * width, GRID_MAX),
        Fraction(n.y_bottom * height, GRID_MAX),
    )


def serialize_box(n: NormBox) -> str:
    """Render a box as ``{<a><b><c><d>}``."""
    return f"{{<{n.x_left}><{n.y_top}><{n.x_right}><{n.y_bottom}>}}"


def scan_box(text: str, pos: int = 0) -> Tuple[NormBox, int]:
    """
    Read one box group starting exactly at ``text[pos]``.

    Returns:
        The box and the index just past its closing brace

    Raises:
        BoxSyntaxError, BoxRangeError, BoxOrderError: With absolute byte offsets
    """
    if not text.startswith("{", pos):
        raise BoxSyntaxError("expected '{'", byte_offset(text, pos))
    pos += 1

    values = []
    starts = []
    for name in _FIELDS:
        if not text.startswith("<", pos):
            raise BoxSyntaxError(f"expected '<' before {name}", byte_offset(text, pos))
        pos += 1
        start = pos
        while pos < len(text) and text[pos] in _DIGITS:
            pos += 1
        digits = text[start:pos]
        if not digits:
            raise BoxSyntaxError(f"expected digits for {name}", byte_offset(text, start))
        if len(digits) > 1 and digits[0] == "0":
            raise BoxSyntaxError(f"leading zero in {name}", byte_offset(text, start))
        value = int(digits)
        if value > GRID_MAX:
            raise BoxRangeError(
                f"{name}={value} outside [0, {GRID_MAX}]", byte_offset(text, start)
            )
        if not text.startswith(">", pos):
            raise BoxSyntaxError(f"expected '>' after {name}", byte_offset(text, pos))
        pos += 1
        values.append(value)
        starts.append(start)

    if not text.startswith("}", pos):
        raise BoxSyntaxError("expected '}'", byte_offset(text, pos))
    pos += 1

    x0, y0, x1, y1 = values
    if x0 > x1:
        raise BoxOrderError(f"x_left {x0} > x_right {x1}", byte_offset(text, starts[2]))
    if y0 > y1:
        raise BoxOrderError(f"y_top {y0} > y_bottom {y1}", byte_offset(text, starts[3]))
    return NormBox(x0, y0, x1, y1), pos


def parse_box(s: str) -> NormBox:
    """
    Parse the exact serialized form of a box.

    Raises:
        ParseError: Malformed syntax, out-of-range value, ordering violation
            or trailing text, each as its own subclass
    """
    box, end = scan_box(s, 0)
    if end != len(s):
        raise TrailingDataError("unexpected text after box", byte_offset(s, end))
    return box


def find_first_box(text: str) -> Optional[Tuple[NormBox, int, int]]:
    """
    Scan left to right for the first well-formed box group.

    Returns:
        ``(box, start, end)`` character positions, or None if there is none
    """
    pos = text.find("{")
    while pos != -1:
        try:
            box, end = scan_box(text, pos)
        except ParseError:
            pos = text.find("{", pos + 1)
            continue
        return box, pos, end
    return None


def overlap_areas(a: NormBox, b: NormBox) -> Tuple[int, int]:
    """Exact (intersection, union) areas of two grid boxes."""
    iw = max(0, min(a.x_right, b.x_right) - max(a.x_left, b.x_left))
    ih = max(0, min(a.y_bottom, b.y_bottom) - max(a.y_top, b.y_top))
    intersection = iw * ih
    return intersection, a.area + b.area - intersection


def iou(a: NormBox, b: NormBox) -> float:
    """Intersection over union; 0.0 when the union has zero area."""
    intersection, union = overlap_areas(a, b)
    if union == 0:
        return 0.0
    return intersection / union


BoxesLike = Union[Iterable[NormBox], np.ndarray]


def _as_array(boxes: BoxesLike) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        arr = np.array([box.as_tuple() for box in boxes], dtype=np.float64)
    arr = arr.reshape(-1, 4) if arr.size == 0 else arr
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValidationError(f"boxes must have shape (N, 4), got {arr.shape}")
    return arr


def iou_matrix(boxes_a: BoxesLike, boxes_b: BoxesLike) -> np.ndarray:
    """
    Pairwise IoU between two box sets.

    Args:
        boxes_a: N boxes, as NormBox values or an (N, 4) array
        boxes_b: M boxes, same forms

    Returns:
        (N, M) float64 array following the same zero-union convention as iou
    """
    a = _as_array(boxes_a)
    b = _as_array(boxes_b)

    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])

    iw = np.clip(
        np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0.0,
        None,
    )
    ih = np.clip(
        np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
        0.0,
        None,
    )
    intersection = iw * ih
    union = area_a[:, None] + area_b[None, :] - intersection
    safe_union = np.where(union > 0, union, 1.0)
    return np.where(union > 0, intersection / safe_union, 0.0)
