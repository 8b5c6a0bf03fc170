"""
Streaming JSONL reading and writing.

Files are UTF-8 with LF line endings, one compact JSON object per line.
Readers never load a whole file; ``ShardIndex`` keeps only byte offsets so
sampled records can be fetched by position.
"""

from __future__ import annotations

import json
from array import array
from pathlib import Path
from typing import IO, Any, Callable, Dict, Iterator, Optional, Tuple, TypeVar, Union

import numpy as np
from loguru import logger

from vl_instruct.errors import ConfigError, DataError, SchemaError

T = TypeVar("T")
PathLike = Union[str, Path]

FAIL = "fail"
SKIP = "skip"


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _decode(raw: str, path: str, line_no: int) -> Dict[str, Any]:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", path, line_no) from exc
    if not isinstance(obj, dict):
        raise SchemaError("expected a JSON object", path, line_no)
    return obj


def _open_input(path: PathLike) -> IO[str]:
    try:
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot open {path}: {exc.strerror}") from exc


def iter_records(
    path: PathLike,
    parse: Optional[Callable[[Dict[str, Any]], T]] = None,
    on_error: str = FAIL,
    on_skip: Optional[Callable[[SchemaError], None]] = None,
) -> Iterator[Tuple[int, Any]]:
    """
    Yield ``(line_number, record)`` for every non-blank line.

    Args:
        path: JSONL file
        parse: Optional converter from the decoded dict to a record type
        on_error: ``fail`` raises the first SchemaError; ``skip`` logs and continues
        on_skip: Called with each skipped error in skip mode

    Raises:
        SchemaError: Bad JSON or a record the converter rejects (fail mode)
        ConfigError: The file cannot be opened
    """
    if on_error not in (FAIL, SKIP):
        raise ConfigError(f"on_error must be '{FAIL}' or '{SKIP}', got '{on_error}'")
    name = str(path)
    with _open_input(path) as handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                obj = _decode(line, name, line_no)
                yield line_no, (parse(obj) if parse is not None else obj)
            except SchemaError as exc:
                if on_error == FAIL:
                    raise
                _skip(exc, on_skip)
            except DataError as exc:
                error = SchemaError(str(exc), name, line_no)
                if on_error == FAIL:
                    raise error from exc
                _skip(error, on_skip)


def _skip(error: SchemaError, on_skip: Optional[Callable[[SchemaError], None]]) -> None:
    if on_skip is not None:
        on_skip(error)
    else:
        logger.warning("Skipping record: {}", error)


class JsonlWriter:
    """
    Write one compact JSON object per line.

    Example:
        with JsonlWriter("out.jsonl") as writer:
            writer.write({"id": "a"})
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.count = 0
        self._handle: Optional[IO[str]] = None

    def __enter__(self) -> JsonlWriter:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w", encoding="utf-8", newline="\n")
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def write(self, obj: Dict[str, Any]) -> None:
        if self._handle is None:
            raise RuntimeError("JsonlWriter used outside of a with block")
        self._handle.write(dumps(obj))
        self._handle.write("\n")
        self.count += 1


class ShardIndex:
    """
    Byte-offset index over the non-blank lines of a JSONL shard.

    Memory is two int64 entries per record, independent of record size.
    """

    def __init__(self, path: PathLike):
        self.path = str(path)
        offsets = array("q")
        line_numbers = array("q")
        try:
            handle = open(self.path, "rb")
        except OSError as exc:
            raise ConfigError(f"cannot open {self.path}: {exc.strerror}") from exc
        with handle:
            position = 0
            for line_no, raw in enumerate(handle, 1):
                if raw.strip():
                    offsets.append(position)
                    line_numbers.append(line_no)
                position += len(raw)
        self.offsets = np.frombuffer(offsets, dtype=np.int64) if offsets else np.zeros(0, np.int64)
        self.line_numbers = (
            np.frombuffer(line_numbers, dtype=np.int64) if line_numbers else np.zeros(0, np.int64)
        )
        self._handle: Optional[IO[bytes]] = None

    def __len__(self) -> int:
        return int(self.offsets.shape[0])

    def read(self, index: int) -> Tuple[int, Dict[str, Any]]:
        """Return ``(line_number, decoded object)`` for the index-th record."""
        if self._handle is None:
            self._handle = open(self.path, "rb")
        self._handle.seek(int(self.offsets[index]))
        raw = self._handle.readline().decode("utf-8")
        line_no = int(self.line_numbers[index])
        return line_no, _decode(raw, self.path, line_no)

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> ShardIndex:
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()
