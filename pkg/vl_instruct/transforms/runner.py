"""
Stream a transform over a JSONL file, optionally across worker processes.

Output order always equals input order. With ``jobs > 1`` the input is read
in bounded windows of ``jobs * chunk_size`` records; each window is split
into chunks, mapped in parallel and written before the next window is read.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from itertools import islice
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

from loguru import logger

from vl_instruct.errors import ConfigError, DataError, SchemaError
from vl_instruct.jsonl import FAIL, JsonlWriter, iter_records
from vl_instruct.logger import RunLogger
from vl_instruct.transforms.base import BaseTransform, JsonObj, create_transform

DEFAULT_CHUNK_SIZE = 1024

# (line number, outputs, error message)
ChunkResult = List[Tuple[int, Optional[List[JsonObj]], Optional[str]]]


def apply_chunk(
    name: str, options: Dict[str, Any], chunk: List[Tuple[int, JsonObj]]
) -> ChunkResult:
    """Worker entry point: rebuild the transform and apply it to one chunk."""
    transform = create_transform(name, **options)
    results: ChunkResult = []
    for line_no, obj in chunk:
        try:
            results.append((line_no, transform.apply(obj), None))
        except DataError as exc:
            results.append((line_no, None, str(exc)))
    return results


def _chunks(items: Iterator[Tuple[int, Any]], size: int) -> Iterator[List[Tuple[int, Any]]]:
    while True:
        chunk = list(islice(items, size))
        if not chunk:
            return
        yield chunk


class TransformRunner:
    """
    Apply one transform to one input file.

    Args:
        transform: The transform to run
        on_error: ``fail`` stops at the first bad record; ``skip`` logs it and continues
        jobs: Worker processes for stateless transforms
        run_logger: Event hooks; counts end up in the run manifest
    """

    def __init__(
        self,
        transform: BaseTransform,
        on_error: str = FAIL,
        jobs: int = 1,
        run_logger: Optional[RunLogger] = None,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
    ):
        if jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {jobs}")
        if chunk_size < 1:
            raise ConfigError(f"chunk_size must be at least 1, got {chunk_size}")
        self.transform = transform
        self.on_error = on_error
        self.jobs = jobs if transform.stateless else 1
        self.run_logger = run_logger or RunLogger(f"compile {transform.name}")
        self.chunk_size = chunk_size
        if jobs > 1 and not transform.stateless:
            logger.warning(
                "Transform '{}' needs the whole input; running with 1 job", transform.name
            )

    def run(self, in_path: Union[str, Path], out_path: Union[str, Path]) -> int:
        """
        Transform ``in_path`` into ``out_path``.

        Returns:
            Number of records written

        Raises:
            SchemaError: First bad input record, in fail mode
        """
        source = str(in_path)
        with JsonlWriter(out_path) as writer:
            for outputs in self._outputs(source):
                for obj in outputs:
                    writer.write(obj)
                    self.run_logger.on_record_written(str(obj.get("id", "")))
        self.run_logger.on_complete({"transform": self.transform.name, "jobs": self.jobs})
        return writer.count

    def _read(self, source: str, parse: Any = None) -> Iterator[Tuple[int, Any]]:
        return iter_records(
            source, parse=parse, on_error=self.on_error, on_skip=self.run_logger.on_record_skipped
        )

    def _outputs(self, source: str) -> Iterator[List[JsonObj]]:
        if not self.transform.stateless:
            yield from self.transform.run(self._read(source, self.transform.parse))
        elif self.jobs == 1:
            yield from self._sequential(source)
        else:
            yield from self._parallel(source)

    def _sequential(self, source: str) -> Iterator[List[JsonObj]]:
        for line_no, obj in self._read(source):
            try:
                outputs = self.transform.apply(obj)
            except DataError as exc:
                self._bad_record(source, line_no, str(exc), exc)
                continue
            yield outputs

    def _parallel(self, source: str) -> Iterator[List[JsonObj]]:
        name = self.transform.name
        options = self.transform.options()
        window = self.jobs * self.chunk_size
        with ProcessPoolExecutor(max_workers=self.jobs) as executor:
            for records in _chunks(self._read(source), window):
                chunks = list(_chunks(iter(records), self.chunk_size))
                n = len(chunks)
                results = executor.map(apply_chunk, [name] * n, [options] * n, chunks)
                for result in results:
                    yield from self._collect(source, result)

    def _collect(self, source: str, result: ChunkResult) -> Iterable[List[JsonObj]]:
        for line_no, outputs, error in result:
            if error is not None:
                self._bad_record(source, line_no, error)
                continue
            yield outputs or []

    def _bad_record(
        self, source: str, line_no: int, message: str, cause: Optional[Exception] = None
    ) -> None:
        error = SchemaError(message, source, line_no)
        if self.on_error == FAIL:
            raise error from cause
        self.run_logger.on_record_skipped(error)
