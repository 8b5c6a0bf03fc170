"""
Visual-token grouping and positional-table interpolation.

Both operations are pure numpy transforms in float64. Arrays move between
tools in a small binary container::

    b"VLTENSR1" | h, w, d as little-endian uint64 | h*w*d little-endian float64
    [| d float64 class-token vector]

or as JSON (``{"h", "w", "d", "data", "cls"}``) for small fixtures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from vl_instruct.errors import DataError, ValidationError

MAGIC = b"VLTENSR1"
_HEADER = np.dtype([("h", "<u8"), ("w", "<u8"), ("d", "<u8")])
_FLOAT = np.dtype("<f8")

PathLike = Union[str, Path]


class GroupMode(str, Enum):
    ROW_MAJOR_4 = "row-major-4"
    BLOCK_2X2 = "block-2x2"


@dataclass(frozen=True)
class TokenGrid:
    """``h * w`` token vectors of dimension ``d`` in row-major order."""

    tokens: np.ndarray
    h: int
    w: int

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise ValidationError(f"tokens must be 2-D (h*w, d), got shape {tokens.shape}")
        if self.h < 1 or self.w < 1 or tokens.shape[0] != self.h * self.w:
            raise ValidationError(
                f"token count {tokens.shape[0]} does not match grid {self.h}x{self.w}"
            )
        object.__setattr__(self, "tokens", tokens)

    @property
    def d(self) -> int:
        return int(self.tokens.shape[1])

    def as_grid(self) -> np.ndarray:
        return self.tokens.reshape(self.h, self.w, self.d)

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> TokenGrid:
        h, w, d = grid.shape
        return cls(grid.reshape(h * w, d), h, w)


@dataclass(frozen=True)
class PosTable:
    """An ``s x s`` grid of positional vectors plus an optional class-token vector."""

    grid: np.ndarray
    cls: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[0] != grid.shape[1] or grid.shape[0] < 1:
            raise ValidationError(
                f"positional grid must be (s, s, d) with s >= 1, got {grid.shape}"
            )
        object.__setattr__(self, "grid", grid)
        if self.cls is not None:
            cls = np.asarray(self.cls, dtype=np.float64)
            if cls.shape != (grid.shape[2],):
                raise ValidationError(
                    f"class-token vector must have shape ({grid.shape[2]},), got {cls.shape}"
                )
            object.__setattr__(self, "cls", cls)

    @property
    def side(self) -> int:
        return int(self.grid.shape[0])

    @property
    def d(self) -> int:
        return int(self.grid.shape[2])


def group_tokens(g: TokenGrid, mode: Union[GroupMode, str] = GroupMode.ROW_MAJOR_4) -> TokenGrid:
    """
    Concatenate groups of four tokens into one token of dimension ``4d``.

    ``row-major-4`` takes sequence-consecutive quadruples; the output grid is
    ``(h, w/4)`` when ``w`` is divisible by 4 and ``(h*w/4, 1)`` otherwise.
    ``block-2x2`` takes each 2x2 spatial block (row-major within the block,
    blocks row-major) and yields an ``(h/2, w/2)`` grid.

    Raises:
        ValidationError: Grid dimensions incompatible with the mode
    """
    mode = GroupMode(mode)
    n, d = g.tokens.shape
    if mode is GroupMode.ROW_MAJOR_4:
        if n % 4:
            raise ValidationError(f"row-major-4 needs h*w divisible by 4, got {g.h}x{g.w}")
        grouped = g.tokens.reshape(n // 4, 4 * d)
        if g.w % 4 == 0:
            return TokenGrid(grouped, g.h, g.w // 4)
        return TokenGrid(grouped, n // 4, 1)

    if g.h % 2 or g.w % 2:
        raise ValidationError(f"block-2x2 needs even h and w, got {g.h}x{g.w}")
    blocks = g.as_grid().reshape(g.h // 2, 2, g.w // 2, 2, d).transpose(0, 2, 1, 3, 4)
    return TokenGrid(blocks.reshape(n // 4, 4 * d), g.h // 2, g.w // 2)


def _weights(source: int, target: int) -> np.ndarray:
    """(target, source) align-corners linear interpolation weights."""
    if target == 1:
        positions = np.array([(source - 1) / 2.0])
    else:
        positions = np.arange(target, dtype=np.float64) * (source - 1) / (target - 1)
    lower = np.floor(positions).astype(np.int64)
    upper = np.minimum(lower + 1, source - 1)
    frac = positions - lower
    weights = np.zeros((target, source), dtype=np.float64)
    rows = np.arange(target)
    np.add.at(weights, (rows, lower), 1.0 - frac)
    np.add.at(weights, (rows, upper), frac)
    return weights


def interpolate_pos(p: PosTable, target_side: int) -> PosTable:
    """
    Resize the positional grid to ``target_side`` with align-corners bilinear sampling.

    Target index ``i`` samples source coordinate ``i * (s - 1) / (target_side - 1)``;
    a single-cell target samples the grid center. The class-token vector is
    passed through unchanged.

    Raises:
        ValidationError: If target_side < 1
    """
    if target_side < 1:
        raise ValidationError(f"target_side must be at least 1, got {target_side}")
    if target_side == p.side:
        return PosTable(p.grid.copy(), None if p.cls is None else p.cls.copy())
    weights = _weights(p.side, target_side)
    grid = np.einsum("ij,jkd,lk->ild", weights, p.grid, weights)
    return PosTable(grid, None if p.cls is None else p.cls.copy())


# -- containers -----------------------------------------------------------------


def save_array(path: PathLike, grid: np.ndarray, cls: Optional[np.ndarray] = None) -> None:
    """Write an ``(h, w, d)`` array (and optional class vector) in the binary container."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValidationError(f"expected an (h, w, d) array, got shape {grid.shape}")
    header = np.array([grid.shape], dtype=_HEADER)
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(header.tobytes())
        handle.write(np.ascontiguousarray(grid, dtype=_FLOAT).tobytes())
        if cls is not None:
            handle.write(np.ascontiguousarray(cls, dtype=_FLOAT).tobytes())


def load_array(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Read a binary container.

    Returns:
        ``(grid of shape (h, w, d), class vector or None)``

    Raises:
        DataError: Bad magic, truncated data or trailing bytes
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a tensor container (bad magic)")
    offset = len(MAGIC)
    if len(raw) < offset + _HEADER.itemsize:
        raise DataError(f"{path}: truncated header")
    header = np.frombuffer(raw, dtype=_HEADER, count=1, offset=offset)[0]
    h, w, d = (int(header[name]) for name in ("h", "w", "d"))
    offset += _HEADER.itemsize

    body = len(raw) - offset
    size = h * w * d * _FLOAT.itemsize
    if body == size:
        cls = None
    elif body == size + d * _FLOAT.itemsize:
        cls = np.frombuffer(raw, dtype=_FLOAT, count=d, offset=offset + size).astype(np.float64)
    else:
        raise DataError(f"{path}: expected {size} data bytes for {h}x{w}x{d}, found {body}")
    grid = np.frombuffer(raw, dtype=_FLOAT, count=h * w * d, offset=offset)
    return grid.astype(np.float64).reshape(h, w, d), cls


def to_json(grid: np.ndarray, cls: Optional[np.ndarray] = None) -> Dict[str, Any]:
    h, w, d = grid.shape
    obj: Dict[str, Any] = {"h": h, "w": w, "d": d, "data": np.asarray(grid).tolist()}
    if cls is not None:
        obj["cls"] = np.asarray(cls).tolist()
    return obj


def from_json(obj: Dict[str, Any]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Raises:
        DataError: Missing keys or data not matching the declared shape
    """
    try:
        shape = (int(obj["h"]), int(obj["w"]), int(obj["d"]))
        grid = np.asarray(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad tensor JSON: {exc}") from exc
    if grid.shape != shape:
        raise DataError(f"tensor JSON declares {shape} but data has shape {grid.shape}")
    cls = obj.get("cls")
    return grid, None if cls is None else np.asarray(cls, dtype=np.float64)


def read_tensor(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Read either container form, picking JSON for ``.json`` files."""
    if str(path).endswith(".json"):
        with open(path, encoding="utf-8") as handle:
            return from_json(json.load(handle))
    return load_array(path)


def write_tensor(path: PathLike, grid: np.ndarray, cls: Optional[np.ndarray] = None) -> None:
    if str(path).endswith(".json"):
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(to_json(grid, cls), handle)
            handle.write("\n")
    else:
        save_array(path, grid, cls)
