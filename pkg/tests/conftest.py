"""Pytest configuration and shared fixtures for vl-instruct tests."""

import json
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List

import pytest
from loguru import logger

from tests.fixtures.sample_data import (
    CAPTION_RECORD,
    EXAMPLE_CAPTION,
    REC_ANNOTATION,
    REFER_RECORD,
    VQA_RECORD,
)
from vl_instruct.corpus import CorpusRecord, ImageMeta
from vl_instruct.markup import GroundedText, parse_grounded


@pytest.fixture
def write_jsonl(tmp_path: Path) -> Callable[..., Path]:
    """Write objects (or raw lines) to a JSONL file under tmp_path."""

    def _write(name: str, rows: Iterable[Any]) -> Path:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for row in rows:
                line = row if isinstance(row, str) else json.dumps(row, ensure_ascii=False)
                handle.write(line + "\n")
        return path

    return _write


@pytest.fixture
def read_jsonl() -> Callable[[Path], List[Dict[str, Any]]]:
    """Decode every non-blank line of a JSONL file."""

    def _read(path: Path) -> List[Dict[str, Any]]:
        with open(path, encoding="utf-8") as handle:
            return [json.loads(line) for line in handle if line.strip()]

    return _read


@pytest.fixture
def log_records():
    """Collect loguru records emitted during the test."""
    records: List[Dict[str, Any]] = []
    handler_id = logger.add(lambda message: records.append(message.record), level="TRACE")
    yield records
    logger.remove(handler_id)


@pytest.fixture
def example_caption() -> GroundedText:
    return parse_grounded(EXAMPLE_CAPTION)


@pytest.fixture
def square_image() -> ImageMeta:
    return ImageMeta("coco/000001.jpg", 448, 448)


@pytest.fixture
def vqa_record() -> CorpusRecord:
    return CorpusRecord.from_json(VQA_RECORD)


@pytest.fixture
def refer_record() -> CorpusRecord:
    return CorpusRecord.from_json(REFER_RECORD)


@pytest.fixture
def caption_record() -> CorpusRecord:
    return CorpusRecord.from_json(CAPTION_RECORD)


@pytest.fixture
def rec_annotation() -> Dict[str, Any]:
    return dict(REC_ANNOTATION)


# Markers
def pytest_configure(config):
    """Configure custom pytest markers."""
    config.addinivalue_line("markers", "slow: mark test as slow running")
