"""Small shared helpers: JSONL I/O, resume journals, hashing, rounding."""

from __future__ import annotations

import hashlib
import json
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Iterable, Iterator


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad JSON line: {exc}") from exc


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def append_jsonl(path: str | Path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        fh.flush()


class Journal:
    """Append-only log of completed work keys, used to resume batches.

    One key per line. Re-marking a key is harmless; readers only care
    about membership.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.done: set[str] = set()
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self.done = {line.rstrip("\n") for line in fh if line.strip()}

    def __contains__(self, key: str) -> bool:
        return key in self.done

    def mark(self, key: str) -> None:
        if key in self.done:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(key + "\n")
            fh.flush()
        self.done.add(key)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def stable_hash(text: str, length: int = 12) -> str:
    """First `length` hex chars of sha256 of a UTF-8 string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def round2_half_up(numerator: float | int, denominator: float | int = 1) -> float:
    """Round numerator/denominator to 2 decimals, ties away from zero.

    Uses Decimal so printed-value comparisons do not wobble on float
    representation (e.g. 2.675 rounds to 2.68, not 2.67).
    """
    value = Decimal(str(numerator)) / Decimal(str(denominator))
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def fingerprint(config: dict[str, Any], length: int = 12) -> str:
    """Stable short hash of a JSON-serializable config dict."""
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:length]
