"""Dataset model and I/O for multi-modal knowledge graphs.

A dataset directory holds triple splits as TSV (``head<TAB>relation<TAB>tail``),
entity metadata as JSONL, and an optional image manifest written by the
crawler. Loading validates referential integrity up front so downstream
stages never see dangling ids. Loaded datasets are treated as immutable;
operations that change ids return a new dataset.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .crawler import ImageRecord, image_filename
from .errors import DatasetError, QidConflictError
from .util import read_jsonl, round2_half_up, stable_hash, write_jsonl

QID_RE = re.compile(r"^(Q[0-9]+|X[0-9a-f]{12})$")

SPLIT_FILES = ("train.tsv", "valid.tsv", "test.tsv")
ENTITIES_FILE = "entities.jsonl"
IMAGES_FILE = "images.jsonl"


@dataclass(frozen=True)
class Entity:
    id: str
    name: str
    qid: str | None = None
    description: str | None = None


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str


@dataclass
class Dataset:
    """An in-memory dataset. Treat as read-only once constructed."""

    root: Path | None
    entities: list[Entity]
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    images: list[ImageRecord] = field(default_factory=list)

    def __post_init__(self):
        self.by_id = {e.id: e for e in self.entities}
        self.by_qid = {e.qid: e for e in self.entities if e.qid}

    @property
    def relations(self) -> list[str]:
        seen: dict[str, None] = {}
        for triple in (*self.train, *self.valid, *self.test):
            seen.setdefault(triple.relation, None)
        return list(seen)

    def images_for(self, qid: str, source: str | None = None) -> list[ImageRecord]:
        records = [r for r in self.images if r.qid == qid]
        if source is not None:
            records = [r for r in records if r.source == source]
        return sorted(records, key=lambda r: (r.source, r.index))

    def all_triples(self) -> list[Triple]:
        return [*self.train, *self.valid, *self.test]


@dataclass(frozen=True)
class SourceImageStats:
    total_images: int
    entities_with_images: int
    avg_images_per_covered_entity: float


@dataclass(frozen=True)
class DatasetStats:
    entity_count: int
    relation_count: int
    train_count: int
    valid_count: int
    test_count: int
    text_count: int
    per_source: dict[str, SourceImageStats]

    def to_dict(self) -> dict:
        return {
            "entity_count": self.entity_count,
            "relation_count": self.relation_count,
            "train_count": self.train_count,
            "valid_count": self.valid_count,
            "test_count": self.test_count,
            "text_count": self.text_count,
            "per_source": {
                name: {
                    "total_images": s.total_images,
                    "entities_with_images": s.entities_with_images,
                    "avg_images_per_covered_entity": s.avg_images_per_covered_entity,
                }
                for name, s in sorted(self.per_source.items())
            },
        }


def _read_triples(path: Path) -> list[Triple]:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(
                    f"{path.name}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            triples.append(Triple(*parts))
    return triples


def _read_entities(path: Path) -> list[Entity]:
    entities = []
    seen_ids: set[str] = set()
    seen_qids: set[str] = set()
    for lineno, row in enumerate(read_jsonl(path), 1):
        if "id" not in row or "name" not in row:
            raise DatasetError(f"{path.name}:{lineno}: entity rows need 'id' and 'name'")
        qid = row.get("qid")
        if qid is not None and not QID_RE.match(qid):
            raise DatasetError(f"{path.name}:{lineno}: malformed qid {qid!r}")
        if row["id"] in seen_ids:
            raise DatasetError(f"{path.name}:{lineno}: duplicate entity id {row['id']!r}")
        if qid is not None and qid in seen_qids:
            raise QidConflictError(f"{path.name}:{lineno}: duplicate qid {qid!r}")
        seen_ids.add(row["id"])
        if qid is not None:
            seen_qids.add(qid)
        entities.append(
            Entity(id=row["id"], name=row["name"], qid=qid, description=row.get("description"))
        )
    return entities


def load_dataset(root: str | Path) -> Dataset:
    """Load and validate a dataset directory.

    Raises DatasetError when required files are missing, when a triple
    line is malformed, or when triples reference unknown entity ids.
    Every dangling reference is reported with file and line number.
    """
    root = Path(root)
    missing = [n for n in (*SPLIT_FILES, ENTITIES_FILE) if not (root / n).exists()]
    if missing:
        raise DatasetError(f"{root}: missing required files: {', '.join(missing)}")

    entities = _read_entities(root / ENTITIES_FILE)
    known = {e.id for e in entities}

    splits = {}
    dangling = []
    for name in SPLIT_FILES:
        triples = _read_triples(root / name)
        for lineno, triple in enumerate(triples, 1):
            for eid in (triple.head, triple.tail):
                if eid not in known:
                    dangling.append(f"{name}:{lineno}: unknown entity {eid!r}")
        splits[name] = triples
    if dangling:
        shown = "; ".join(dangling[:20])
        extra = f" (+{len(dangling) - 20} more)" if len(dangling) > 20 else ""
        raise DatasetError(f"{root}: dangling entity references: {shown}{extra}")

    images = []
    if (root / IMAGES_FILE).exists():
        qids = {e.qid for e in entities if e.qid}
        for lineno, row in enumerate(read_jsonl(root / IMAGES_FILE), 1):
            record = ImageRecord.from_dict(row)
            if record.qid not in qids:
                raise DatasetError(
                    f"{IMAGES_FILE}:{lineno}: image references unknown qid {record.qid!r}"
                )
            images.append(record)

    return Dataset(
        root=root,
        entities=entities,
        train=splits["train.tsv"],
        valid=splits["valid.tsv"],
        test=splits["test.tsv"],
        images=images,
    )


def write_dataset(dataset: Dataset, root: str | Path) -> None:
    """Write a dataset directory; inverse of load_dataset for canonical input."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, triples in (
        ("train.tsv", dataset.train),
        ("valid.tsv", dataset.valid),
        ("test.tsv", dataset.test),
    ):
        with open(root / name, "w", encoding="utf-8") as fh:
            for t in triples:
                fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")
    write_jsonl(
        root / ENTITIES_FILE,
        (
            {"id": e.id, "qid": e.qid, "name": e.name, "description": e.description}
            for e in dataset.entities
        ),
    )
    if dataset.images:
        write_jsonl(root / IMAGES_FILE, (r.to_dict() for r in dataset.images))


def surrogate_qid(source_id: str) -> str:
    """Deterministic placeholder id for entities without a known mapping."""
    return "X" + stable_hash(source_id, 12)


def normalize_ids(dataset: Dataset, mapping: dict[str, str]) -> Dataset:
    """Return a copy of the dataset with canonical entity ids assigned.

    The mapping is keyed by source id or by entity name; entities not
    covered get a deterministic surrogate derived from their source id.
    Image manifest rows are re-keyed and their filenames rewritten so the
    filename grammar stays valid. Two entities resolving to the same
    canonical id is an error.
    """
    assigned: dict[str, str] = {}
    owners: dict[str, str] = {}
    for entity in dataset.entities:
        qid = mapping.get(entity.id) or mapping.get(entity.name) or surrogate_qid(entity.id)
        if not QID_RE.match(qid):
            raise DatasetError(f"mapping for {entity.id!r} produced malformed id {qid!r}")
        if qid in owners:
            raise QidConflictError(
                f"entities {owners[qid]!r} and {entity.id!r} both map to {qid!r}"
            )
        owners[qid] = entity.id
        assigned[entity.id] = qid

    entities = [
        Entity(id=e.id, name=e.name, qid=assigned[e.id], description=e.description)
        for e in dataset.entities
    ]

    old_to_new = {
        e.qid: assigned[e.id] for e in dataset.entities if e.qid and e.qid in dataset.by_qid
    }
    images = []
    for record in dataset.images:
        new_qid = old_to_new.get(record.qid)
        if new_qid is None:
            raise DatasetError(f"image {record.filename!r} references unmapped qid {record.qid!r}")
        images.append(
            record.replace(qid=new_qid, filename=image_filename(new_qid, record.index, record.mime))
        )

    return Dataset(
        root=dataset.root,
        entities=entities,
        train=list(dataset.train),
        valid=list(dataset.valid),
        test=list(dataset.test),
        images=images,
    )


def compute_stats(dataset: Dataset) -> DatasetStats:
    """Corpus-level statistics with per-image-source coverage breakdown.

    The per-source average is total images over entities with at least
    one image from that source, rounded half-up to 2 decimals; 0.00 when
    no entity is covered.
    """
    per_source: dict[str, SourceImageStats] = {}
    sources = sorted({r.source for r in dataset.images}) or []
    for source in sources:
        records = [r for r in dataset.images if r.source == source]
        covered = len({r.qid for r in records})
        avg = round2_half_up(len(records), covered) if covered else 0.00
        per_source[source] = SourceImageStats(
            total_images=len(records),
            entities_with_images=covered,
            avg_images_per_covered_entity=avg,
        )
    return DatasetStats(
        entity_count=len(dataset.entities),
        relation_count=len(dataset.relations),
        train_count=len(dataset.train),
        valid_count=len(dataset.valid),
        test_count=len(dataset.test),
        text_count=sum(1 for e in dataset.entities if e.description and e.description.strip()),
        per_source=per_source,
    )
