"""Fuse per-image captions into entity-level text.

The fusion step asks an LLM to integrate an entity's captions into one
summary paragraph, validates the shape of the answer, and falls back to
a plain concatenation when the provider will not produce a paragraph.
This module also assembles the non-LLM text variants (joined caption
blocks) used as comparison inputs downstream.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .captioning import Caption
from .crawler import SOURCE_ORIGINAL, SOURCE_RETRIEVED
from .errors import EmptyInputError, MissingModalityError, TransientError
from .util import Journal, append_jsonl

log = logging.getLogger(__name__)

FUSION_TEMPLATE = (
    "Your task is to integrate the following list of visual descriptions for the entity "
    "'{entity_name}' into a rich, detailed, and coherent summary paragraph. Capture as many "
    "key details as possible, such as objects, colors, actions, and settings. Your final "
    "output must be a single paragraph, not a list."
)

CORRECTIVE_INSTRUCTION = (
    "Rewrite your answer as exactly one flowing paragraph: no bullet points, no numbering, "
    "and no blank lines."
)

VARIANT_ORIGINAL = "g_o"
VARIANT_RETRIEVED = "g_n"
VARIANT_BOTH = "g_on"
VARIANT_FUSION = "fusion"
VARIANTS = (VARIANT_ORIGINAL, VARIANT_RETRIEVED, VARIANT_BOTH, VARIANT_FUSION)


@dataclass(frozen=True)
class FusionPrompt:
    entity_name: str
    captions: tuple[str, ...]
    rendered: str


def build_fusion_prompt(entity_name: str, captions: list[str]) -> FusionPrompt:
    """Render the fusion prompt: the fixed instruction, then each caption
    quoted on its own line."""
    if not captions:
        raise EmptyInputError(f"no captions to fuse for {entity_name!r}")
    body = "\n".join(f'"{c}"' for c in captions)
    rendered = FUSION_TEMPLATE.format(entity_name=entity_name) + "\n" + body
    return FusionPrompt(entity_name=entity_name, captions=tuple(captions), rendered=rendered)


@dataclass(frozen=True)
class ParagraphCheck:
    ok: bool
    violations: tuple[str, ...] = ()


_BULLET_PREFIXES = ("-", "*", "•")
_NUMBERED_RE = re.compile(r"^[0-9]+[.)]")


def validate_single_paragraph(text: str) -> ParagraphCheck:
    """Check that text reads as one paragraph.

    Violations: empty text, a blank line, a line starting with a bullet
    marker, or (in multi-line text) a line starting with a numbered-list
    marker. Inline enumeration within a single line is tolerated; the
    marker only signals a list at the start of a line among others.
    """
    if not text.strip():
        return ParagraphCheck(False, ("empty",))
    lines = text.split("\n")
    violations = []
    for line in lines:
        stripped = line.strip()
        if not stripped:
            violations.append("blank_line")
        elif stripped.startswith(_BULLET_PREFIXES):
            violations.append("bullet_line")
        elif len(lines) > 1 and _NUMBERED_RE.match(stripped):
            violations.append("numbered_line")
    seen: dict[str, None] = {}
    for v in violations:
        seen.setdefault(v, None)
    return ParagraphCheck(ok=not violations, violations=tuple(seen))


@dataclass(frozen=True)
class FusedSummary:
    qid: str
    variant: str
    text: str
    model: str | None
    input_caption_count: int
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "variant": self.variant,
            "text": self.text,
            "model": self.model,
            "input_caption_count": self.input_caption_count,
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "FusedSummary":
        return cls(
            qid=row["qid"],
            variant=row["variant"],
            text=row["text"],
            model=row.get("model"),
            input_caption_count=int(row["input_caption_count"]),
            fallback=bool(row.get("fallback", False)),
        )


def _normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def fuse_entity(qid: str, entity_name: str, captions: list[str], provider,
                retries: int = 1) -> FusedSummary:
    """Summarize an entity's captions into a single paragraph.

    Invalid paragraph shape triggers up to ``retries`` re-asks with a
    corrective instruction appended; after that the summary falls back to
    the whitespace-normalized caption concatenation, flagged as such.
    """
    prompt = build_fusion_prompt(entity_name, captions)
    rendered = prompt.rendered
    for _ in range(retries + 1):
        text = provider.summarize(rendered)
        if validate_single_paragraph(text).ok:
            return FusedSummary(
                qid=qid,
                variant=VARIANT_FUSION,
                text=text,
                model=provider.name,
                input_caption_count=len(captions),
            )
        rendered = prompt.rendered + "\n" + CORRECTIVE_INSTRUCTION
    fallback_text = _normalize_whitespace(" ".join(captions))
    return FusedSummary(
        qid=qid,
        variant=VARIANT_FUSION,
        text=fallback_text,
        model=provider.name,
        input_caption_count=len(captions),
        fallback=True,
    )


def usable_captions(dataset, captions: list[Caption], qid: str) -> list[Caption]:
    """Non-degenerate captions for an entity, original source first, then
    retrieved, each in manifest index order."""
    by_filename = {c.filename: c for c in captions if c.qid == qid and not c.degenerate}
    ordered = []
    for source in (SOURCE_ORIGINAL, SOURCE_RETRIEVED):
        for record in dataset.images_for(qid, source):
            caption = by_filename.get(record.filename)
            if caption is not None:
                ordered.append(caption)
    return ordered


def assemble_variant(variant: str, original_texts: list[str],
                     retrieved_texts: list[str]) -> str:
    """Join caption blocks for one of the non-LLM variants.

    Raises MissingModalityError when the variant's required caption
    source has nothing usable.
    """
    if variant == VARIANT_ORIGINAL:
        if not original_texts:
            raise MissingModalityError(f"variant {variant}: no original-source captions")
        return "\n".join(original_texts)
    if variant == VARIANT_RETRIEVED:
        if not retrieved_texts:
            raise MissingModalityError(f"variant {variant}: no retrieved-source captions")
        return "\n".join(retrieved_texts)
    if variant == VARIANT_BOTH:
        if not original_texts or not retrieved_texts:
            raise MissingModalityError(f"variant {variant}: needs captions from both sources")
        return "\n".join(original_texts) + "\n" + "\n".join(retrieved_texts)
    raise ValueError(f"unknown assembled variant {variant!r}")


@dataclass
class FusionBatchReport:
    fused: int = 0
    used_fallback_text: int = 0
    fell_back_to_description: int = 0
    skipped: int = 0
    resumed: int = 0

    def to_dict(self) -> dict:
        return {
            "fused": self.fused,
            "used_fallback_text": self.used_fallback_text,
            "fell_back_to_description": self.fell_back_to_description,
            "skipped": self.skipped,
            "resumed": self.resumed,
        }


def fuse_batch(dataset, captions: list[Caption], provider, output_path: str | Path,
               journal_path: str | Path, retries: int = 1) -> FusionBatchReport:
    """Produce a fusion summary per entity that has usable captions.

    Entities whose captions are all degenerate keep their original
    dataset description as text downstream; no summary row is written
    for them.
    """
    journal = Journal(journal_path)
    report = FusionBatchReport()
    qids = sorted({c.qid for c in captions})
    for qid in qids:
        key = f"{qid}\t{VARIANT_FUSION}\t{provider.name}"
        if key in journal:
            report.resumed += 1
            continue
        entity = dataset.by_qid.get(qid)
        if entity is None:
            report.skipped += 1
            journal.mark(key)
            continue
        usable = usable_captions(dataset, captions, qid)
        if not usable:
            report.fell_back_to_description += 1
            journal.mark(key)
            continue
        try:
            summary = fuse_entity(qid, entity.name, [c.text for c in usable], provider,
                                  retries=retries)
        except TransientError as exc:
            log.warning("fusion for %s hit a transient failure, will retry on resume: %s",
                        qid, exc)
            report.skipped += 1
            continue
        append_jsonl(output_path, summary.to_dict())
        report.fused += 1
        if summary.fallback:
            report.used_fallback_text += 1
        journal.mark(key)
    return report


@dataclass
class VariantBatchReport:
    written: int = 0
    missing_inputs: int = 0
    resumed: int = 0

    def to_dict(self) -> dict:
        return {
            "written": self.written,
            "missing_inputs": self.missing_inputs,
            "resumed": self.resumed,
        }


def assemble_variants_batch(dataset, captions: list[Caption], variants: list[str],
                            output_path: str | Path,
                            journal_path: str | Path) -> VariantBatchReport:
    """Write joined-caption variant rows for every entity that has the inputs."""
    journal = Journal(journal_path)
    report = VariantBatchReport()
    qids = sorted({c.qid for c in captions})
    for qid in qids:
        usable = usable_captions(dataset, captions, qid)
        by_source: dict[str, list[str]] = {SOURCE_ORIGINAL: [], SOURCE_RETRIEVED: []}
        by_filename = {c.filename: c for c in usable}
        for source in (SOURCE_ORIGINAL, SOURCE_RETRIEVED):
            for record in dataset.images_for(qid, source):
                caption = by_filename.get(record.filename)
                if caption is not None:
                    by_source[source].append(caption.text)
        for variant in variants:
            if variant == VARIANT_FUSION:
                raise ValueError("fusion rows are produced by fuse_batch, not assembly")
            key = f"{qid}\t{variant}\t-"
            if key in journal:
                report.resumed += 1
                continue
            try:
                text = assemble_variant(variant, by_source[SOURCE_ORIGINAL],
                                        by_source[SOURCE_RETRIEVED])
            except MissingModalityError:
                report.missing_inputs += 1
                journal.mark(key)
                continue
            count = len(by_source[SOURCE_ORIGINAL]) + len(by_source[SOURCE_RETRIEVED])
            if variant == VARIANT_ORIGINAL:
                count = len(by_source[SOURCE_ORIGINAL])
            elif variant == VARIANT_RETRIEVED:
                count = len(by_source[SOURCE_RETRIEVED])
            append_jsonl(
                output_path,
                FusedSummary(qid=qid, variant=variant, text=text, model=None,
                             input_caption_count=count).to_dict(),
            )
            report.written += 1
            journal.mark(key)
    return report
