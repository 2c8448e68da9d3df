"""Atomic file writes and JSON Lines parsing shared across modules."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ValidationError


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a sibling temp file + rename so rereads never see partial output."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, record) pairs; malformed lines raise with their number."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise ValidationError(f"{path}:{lineno}: record must be a JSON object")
            yield lineno, record


def write_jsonl(path, records: Iterable[dict]) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
