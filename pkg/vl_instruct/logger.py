"""
Logging setup and per-run event hooks.

All modules log through loguru. ``RunLogger`` is the hook object commands
pass around; it logs each event and keeps the counts that end up in the run
manifest and evaluation report. Subclass it to observe a run:

- on_record_written: a record reached the output
- on_record_skipped: a bad input record was skipped (skip mode)
- on_missing_prediction: an eval record had no prediction
- on_complete: the command finished
"""

from __future__ import annotations

import sys
from typing import Any, Dict, Optional

from loguru import logger

from vl_instruct.errors import ConfigError, SchemaError

LEVELS = ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL")

_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}"


_handler_id: Optional[int] = None


def configure_logging(level: str = "INFO", serialize: bool = False) -> int:
    """
    Install (or replace) this package's stderr sink.

    Loguru's default handler is removed on first use; sinks added by other
    code are left alone.

    Args:
        level: Minimum level name
        serialize: Emit one JSON object per log line

    Returns:
        The loguru handler id
    """
    global _handler_id
    name = level.upper()
    if name not in LEVELS:
        raise ConfigError(f"unknown log level '{level}' (known: {', '.join(LEVELS)})")
    try:
        logger.remove(0 if _handler_id is None else _handler_id)
    except ValueError:
        pass
    _handler_id = logger.add(sys.stderr, level=name, format=_FORMAT, serialize=serialize)
    return _handler_id


class RunLogger:
    """
    Event hooks for one command run.

    Example:
        class CountingLogger(RunLogger):
            def on_record_written(self, record_id):
                super().on_record_written(record_id)
                seen.append(record_id)
    """

    def __init__(self, command: str = ""):
        self.command = command
        self.written = 0
        self.skipped = 0
        self.missing = 0

    def on_record_written(self, record_id: str) -> None:
        self.written += 1
        logger.trace("Wrote record {}", record_id)

    def on_record_skipped(self, error: SchemaError) -> None:
        """Called for every input record dropped in skip mode."""
        self.skipped += 1
        logger.warning("Skipping record: {}", error)

    def on_missing_prediction(self, record_id: str) -> None:
        self.missing += 1
        logger.warning("No prediction for record {}; counted as incorrect", record_id)

    def on_complete(self, extra: Optional[Dict[str, Any]] = None) -> None:
        details = "".join(f", {key}={value}" for key, value in (extra or {}).items())
        logger.info(
            "{} finished: {} written, {} skipped{}",
            self.command or "run",
            self.written,
            self.skipped,
            details,
        )

    def counts(self) -> Dict[str, int]:
        return {"written": self.written, "skipped": self.skipped, "missing": self.missing}
