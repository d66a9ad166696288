"""Image captioning over a crawled manifest.

Captions are produced by a pluggable provider with a pinned default
prompt, screened for degenerate output, and written to captions.jsonl.
Batches are resumable: work is journaled per (image, provider, prompt).
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .crawler import MediaStore
from .errors import PermanentError, TransientError
from .util import Journal, append_jsonl

log = logging.getLogger(__name__)

# The default prompt is part of the captions' provenance; captions.jsonl
# records prompt_id so outputs from different prompts never mix silently.
DEFAULT_PROMPT_ID = "describe-details-v1"
DEFAULT_PROMPT_TEXT = "Describe the scene, objects, colors, and other details in detail."


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    text: str


DEFAULT_PROMPT = PromptTemplate(id=DEFAULT_PROMPT_ID, text=DEFAULT_PROMPT_TEXT)

_TOKEN_RE = re.compile(r"[\w']+")


def tokenize(text: str) -> list[str]:
    """Case-folded, punctuation-stripped tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class DegenerateCheck:
    degenerate: bool
    reason: str | None = None  # empty_output | token_repetition


def detect_degenerate(text: str, threshold: float = 0.5) -> DegenerateCheck:
    """Flag captions that carry no usable signal.

    A caption is degenerate when it is empty/whitespace, or when its most
    frequent token accounts for more than ``threshold`` of all tokens and
    there are at least 4 tokens. Short captions are never flagged for
    repetition; two words cannot establish a loop.
    """
    if not (0 < threshold <= 1):
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if not text.strip():
        return DegenerateCheck(True, "empty_output")
    tokens = tokenize(text)
    if len(tokens) >= 4:
        top = Counter(tokens).most_common(1)[0][1]
        if top / len(tokens) > threshold:
            return DegenerateCheck(True, "token_repetition")
    return DegenerateCheck(False)


@dataclass(frozen=True)
class Caption:
    filename: str
    qid: str
    provider: str
    prompt_id: str
    text: str
    degenerate: bool
    degenerate_reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "filename": self.filename,
            "qid": self.qid,
            "provider": self.provider,
            "prompt_id": self.prompt_id,
            "text": self.text,
            "degenerate": self.degenerate,
            "degenerate_reason": self.degenerate_reason,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "Caption":
        return cls(
            filename=row["filename"],
            qid=row["qid"],
            provider=row["provider"],
            prompt_id=row["prompt_id"],
            text=row["text"],
            degenerate=bool(row["degenerate"]),
            degenerate_reason=row.get("degenerate_reason"),
        )


def caption_image(record, store: MediaStore, provider,
                  prompt: PromptTemplate = DEFAULT_PROMPT,
                  degenerate_threshold: float = 0.5) -> Caption:
    """Caption a single stored image and screen the result."""
    text = provider.caption(store.read_bytes(record), prompt.text)
    check = detect_degenerate(text, degenerate_threshold)
    return Caption(
        filename=record.filename,
        qid=record.qid,
        provider=provider.name,
        prompt_id=prompt.id,
        text=text,
        degenerate=check.degenerate,
        degenerate_reason=check.reason,
    )


@dataclass
class CaptionBatchReport:
    captioned: int = 0
    degenerate: int = 0
    skipped: int = 0
    resumed: int = 0

    def to_dict(self) -> dict:
        return {
            "captioned": self.captioned,
            "degenerate": self.degenerate,
            "skipped": self.skipped,
            "resumed": self.resumed,
        }


def caption_batch(records, store: MediaStore, provider, output_path: str | Path,
                  journal_path: str | Path, prompt: PromptTemplate = DEFAULT_PROMPT,
                  degenerate_threshold: float = 0.5) -> CaptionBatchReport:
    """Caption every manifest record, resuming past completed work.

    Permanent provider failures skip the image and are counted; transient
    failures leave the image unjournaled so a later run retries it.
    """
    journal = Journal(journal_path)
    report = CaptionBatchReport()
    for record in records:
        key = f"{record.filename}\t{provider.name}\t{prompt.id}"
        if key in journal:
            report.resumed += 1
            continue
        try:
            caption = caption_image(record, store, provider, prompt, degenerate_threshold)
        except PermanentError as exc:
            log.warning("skipping %s: %s", record.filename, exc)
            report.skipped += 1
            journal.mark(key)
            continue
        except TransientError as exc:
            log.warning("transient failure on %s, will retry on resume: %s",
                        record.filename, exc)
            report.skipped += 1
            continue
        append_jsonl(output_path, caption.to_dict())
        report.captioned += 1
        if caption.degenerate:
            report.degenerate += 1
        journal.mark(key)
    return report
