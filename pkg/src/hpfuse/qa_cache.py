"""Append-only JSON-lines store of generated question answers.

One record per line: image_sha256, question_id, question_text, answer_text,
backend_id, created_at. The in-memory index is keyed by
(image_sha256, question_id, backend_id); the file is only ever appended to.
One writer, many readers; writes are serialized by a lock.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

RECORD_FIELDS = ("image_sha256", "question_id", "question_text", "answer_text", "backend_id", "created_at")


@dataclass(frozen=True)
class CacheRecord:
    image_sha256: str
    question_id: int
    question_text: str
    answer_text: str
    backend_id: str
    created_at: str


class AnswerCache:
    """Answer store; ``path=None`` keeps records in memory only."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[CacheRecord] = []
        self.skipped_lines = 0
        self._index: dict[tuple[str, int, str], str] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path) -> "AnswerCache":
        """Rebuild the index from an existing file; corrupt lines are skipped
        with a warning and counted in ``skipped_lines``."""
        cache = cls(path)
        p = Path(path)
        if not p.exists():
            return cache
        with open(p, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    raw = json.loads(line)
                    record = CacheRecord(
                        image_sha256=str(raw["image_sha256"]),
                        question_id=int(raw["question_id"]),
                        question_text=str(raw["question_text"]),
                        answer_text=str(raw["answer_text"]),
                        backend_id=str(raw["backend_id"]),
                        created_at=str(raw["created_at"]),
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    cache.skipped_lines += 1
                    logger.warning("skipping corrupt cache line %d in %s: %s", lineno, p, exc)
                    continue
                cache._remember(record)
        return cache

    def _remember(self, record: CacheRecord) -> None:
        self.records.append(record)
        self._index[(record.image_sha256, record.question_id, record.backend_id)] = record.answer_text

    def get(self, image_sha256: str, question_id: int, backend_id: str) -> str | None:
        return self._index.get((image_sha256, question_id, backend_id))

    def put(self, image_sha256: str, question_id: int, question_text: str,
            answer_text: str, backend_id: str) -> CacheRecord:
        record = CacheRecord(
            image_sha256=image_sha256,
            question_id=question_id,
            question_text=question_text,
            answer_text=answer_text,
            backend_id=backend_id,
            created_at=datetime.now(timezone.utc).isoformat(),
        )
        with self._lock:
            self._remember(record)
            if self.path is not None:
                line = json.dumps({f: getattr(record, f) for f in RECORD_FIELDS})
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
        return record

    def __len__(self) -> int:
        return len(self.records)
