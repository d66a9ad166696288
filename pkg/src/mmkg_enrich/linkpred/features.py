"""Feature construction for the link-prediction bench.

Text is embedded with a deterministic signed hashing vectorizer so runs
are reproducible across processes and platforms (no vocabulary state,
no salted hashes). Image features arrive as precomputed vectors in a
qid-keyed sidecar file.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from ..captioning import tokenize
from ..errors import MissingModalityError
from ..fusion import FusedSummary
from ..util import read_jsonl

DEFAULT_TEXT_DIM = 256

VARIANT_ORIGINAL_DESCRIPTION = "original_description"


def _token_hash(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def featurize_text(text: str, dim: int = DEFAULT_TEXT_DIM) -> np.ndarray:
    """Hash token frequencies into a fixed-width L2-normalized vector.

    Empty or token-free text maps to the zero vector, which downstream
    code treats as "no text for this entity".
    """
    if dim <= 0:
        raise ValueError(f"dim must be positive, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        h = _token_hash(token)
        sign = 1.0 if h & 1 else -1.0
        vec[(h >> 1) % dim] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def load_image_features(path: str | Path) -> dict[str, np.ndarray]:
    """Read a qid-keyed feature sidecar ({"qid": ..., "vector": [...]})."""
    table = {}
    dim = None
    for row in read_jsonl(path):
        vec = np.asarray(row["vector"], dtype=np.float64)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise ValueError(f"{path}: inconsistent vector width for qid {row['qid']!r}")
        table[row["qid"]] = vec
    return table


def summaries_by_qid(summaries: list[FusedSummary], variant: str) -> dict[str, str]:
    return {s.qid: s.text for s in summaries if s.variant == variant}


def compose_entity_texts(dataset, use_description: bool, generated_variant: str | None,
                         summaries: list[FusedSummary] | None = None) -> dict[str, str]:
    """Per-qid text for the run's text channel.

    The channel can carry the original dataset description, a generated
    variant, or both (description first, then the generated text).
    Entities with nothing to say are simply absent from the table.
    """
    generated: dict[str, str] = {}
    if generated_variant is not None:
        if summaries is None:
            raise MissingModalityError(
                f"variant {generated_variant!r} requested but no summaries supplied"
            )
        generated = summaries_by_qid(summaries, generated_variant)
    table = {}
    for entity in dataset.entities:
        if entity.qid is None:
            continue
        parts = []
        if use_description and entity.description and entity.description.strip():
            parts.append(entity.description.strip())
        text = generated.get(entity.qid)
        if generated_variant is not None and text and text.strip():
            parts.append(text.strip())
        if parts:
            table[entity.qid] = "\n".join(parts)
    return table


def text_feature_table(texts: dict[str, str], dim: int = DEFAULT_TEXT_DIM) -> dict[str, np.ndarray]:
    return {qid: featurize_text(text, dim) for qid, text in texts.items()}
