import os
import sys
from pathlib import Path
from typing import Any, Protocol

from loguru import logger

LOG_ENV = "TASCFORGE_LOG"
LOG_LEVELS = {"error": "ERROR", "info": "INFO", "debug": "DEBUG"}


def configure_logging():
    """Replace loguru's default sink with one on stderr at the level named by TASCFORGE_LOG."""
    requested = os.getenv(LOG_ENV, "info").strip().lower()
    logger.remove()
    logger.add(sys.stderr, level=LOG_LEVELS.get(requested, "INFO"))
    if requested not in LOG_LEVELS:
        logger.warning(f"unknown {LOG_ENV}={requested!r}, using info")


class JsonRecord(Protocol):
    def to_json(self, **kwargs: Any) -> str: ...


class RecordWriter:
    """Appends dataclass-json records to a JSON Lines file, one object per line."""

    def __init__(self, path: Path, *, truncate: bool = True):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        if truncate:
            path.write_text("")

    def write(self, record: JsonRecord):
        with self.path.open("a") as f:
            f.write(record.to_json(sort_keys=True))
            f.write("\n")

    def write_all(self, records: list[JsonRecord]):
        for record in records:
            self.write(record)


def read_records[T](path: Path, cls: type[T]) -> list[T]:
    return [cls.from_json(line) for line in path.read_text().splitlines() if line.strip()]
