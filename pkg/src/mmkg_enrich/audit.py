"""Human audit of fused summaries.

A fixed-seed sampler draws auditable cases (entities with a fusion
summary and at least one image), verdicts accumulate in an append-only
JSONL log where the latest verdict per case wins, and a small REST API
serves cases, images, and the tally to an annotation UI.
"""

import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .crawler import FILENAME_RE, MediaStore
from .errors import NotFoundError
from .fusion import VARIANT_FUSION, FusedSummary
from .util import append_jsonl, read_jsonl, stable_hash

RUBRIC_TEXT = (
    "Judge the summary against the images only. A case is a Match when the summary "
    "captures the main visual semantics of the image set; the summary is not required "
    "to identify or verify the entity itself. Pick Mismatch when the summary "
    "contradicts or ignores what the images show, and Uncertain when you cannot tell."
)

VERDICT_MATCH = "Match"
VERDICT_MISMATCH = "Mismatch"
VERDICT_UNCERTAIN = "Uncertain"
VERDICTS = (VERDICT_MATCH, VERDICT_MISMATCH, VERDICT_UNCERTAIN)

STATUS_PENDING = "pending"
STATUS_DONE = "done"


@dataclass(frozen=True)
class AuditCase:
    case_id: str
    qid: str
    entity_name: str
    summary_text: str
    image_filenames: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "qid": self.qid,
            "entity_name": self.entity_name,
            "summary_text": self.summary_text,
            "image_filenames": list(self.image_filenames),
        }

    @classmethod
    def from_dict(cls, row: dict) -> "AuditCase":
        return cls(
            case_id=row["case_id"],
            qid=row["qid"],
            entity_name=row["entity_name"],
            summary_text=row["summary_text"],
            image_filenames=tuple(row["image_filenames"]),
        )


@dataclass
class AuditBatch:
    seed: int
    cases: list[AuditCase] = field(default_factory=list)

    def case(self, case_id: str) -> AuditCase:
        for case in self.cases:
            if case.case_id == case_id:
                return case
        raise NotFoundError(f"no case {case_id!r} in this batch")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "rubric": RUBRIC_TEXT,
                "cases": [c.to_dict() for c in self.cases]}

    @classmethod
    def from_dict(cls, data: dict) -> "AuditBatch":
        return cls(seed=data["seed"], cases=[AuditCase.from_dict(c) for c in data["cases"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "AuditBatch":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_cases(dataset, summaries: list[FusedSummary], n: int, seed: int) -> AuditBatch:
    """Draw n auditable entities uniformly without replacement.

    Eligibility requires a fusion summary and at least one manifest
    image. The draw is a pure function of (eligible set, seed); asking
    for more cases than exist fails loudly with the eligible count.
    """
    fusion_text = {s.qid: s.text for s in summaries if s.variant == VARIANT_FUSION}
    with_images = {r.qid for r in dataset.images}
    eligible = sorted(qid for qid in fusion_text if qid in with_images)
    if n > len(eligible):
        raise ValueError(
            f"requested {n} cases but only {len(eligible)} entities are eligible"
        )
    if n < 0:
        raise ValueError("cannot sample a negative number of cases")
    chosen = random.Random(seed).sample(eligible, n)
    cases = []
    for qid in chosen:
        entity = dataset.by_qid[qid]
        filenames = tuple(r.filename for r in dataset.images_for(qid))
        cases.append(
            AuditCase(
                case_id=stable_hash(f"{qid}|{seed}"),
                qid=qid,
                entity_name=entity.name,
                summary_text=fusion_text[qid],
                image_filenames=filenames,
            )
        )
    return AuditBatch(seed=seed, cases=cases)


@dataclass(frozen=True)
class Verdict:
    case_id: str
    verdict: str
    rationale: str
    hidden_images: tuple[str, ...]
    annotator: str
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "verdict": self.verdict,
            "rationale": self.rationale,
            "hidden_images": list(self.hidden_images),
            "annotator": self.annotator,
            "timestamp": self.timestamp,
        }


class VerdictLog:
    """Append-only verdict history. Never rewritten; resubmissions add
    lines and reporting takes the latest entry per case."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def entries(self) -> list[Verdict]:
        if not self.path.exists():
            return []
        rows = []
        for row in read_jsonl(self.path):
            rows.append(
                Verdict(
                    case_id=row["case_id"],
                    verdict=row["verdict"],
                    rationale=row.get("rationale", ""),
                    hidden_images=tuple(row.get("hidden_images", [])),
                    annotator=row.get("annotator", "anonymous"),
                    timestamp=row["timestamp"],
                )
            )
        return rows

    def append(self, verdict: Verdict) -> None:
        append_jsonl(self.path, verdict.to_dict())

    def latest(self) -> dict[str, Verdict]:
        """Latest verdict per case: newest timestamp wins, file order
        breaks exact timestamp ties."""
        latest: dict[str, Verdict] = {}
        for entry in self.entries():
            current = latest.get(entry.case_id)
            if current is None or entry.timestamp >= current.timestamp:
                latest[entry.case_id] = entry
        return latest


def submit_verdict(batch: AuditBatch, log: VerdictLog, case_id: str, verdict: str,
                   rationale: str = "", hidden_images: list[str] | None = None,
                   annotator: str = "anonymous", timestamp: str | None = None) -> Verdict:
    """Validate and append one verdict.

    Unknown cases raise NotFoundError; a non-Match verdict without a
    rationale, an unknown verdict value, or hidden images outside the
    case raise ValueError.
    """
    case = batch.case(case_id)
    if verdict not in VERDICTS:
        raise ValueError(f"verdict must be one of {VERDICTS}, got {verdict!r}")
    if verdict != VERDICT_MATCH and not rationale.strip():
        raise ValueError(f"a rationale is required for {verdict} verdicts")
    hidden = tuple(hidden_images or ())
    stray = [f for f in hidden if f not in case.image_filenames]
    if stray:
        raise ValueError(f"hidden images not part of case {case_id}: {stray}")
    entry = Verdict(
        case_id=case_id,
        verdict=verdict,
        rationale=rationale,
        hidden_images=hidden,
        annotator=annotator,
        timestamp=timestamp or datetime.now(timezone.utc).isoformat(),
    )
    log.append(entry)
    return entry


def case_status(batch: AuditBatch, log: VerdictLog) -> dict[str, str]:
    latest = log.latest()
    return {
        case.case_id: STATUS_DONE if case.case_id in latest else STATUS_PENDING
        for case in batch.cases
    }


def audit_report(batch: AuditBatch, log: VerdictLog) -> dict:
    """Tally of latest verdicts; full history stays in the log."""
    latest = log.latest()
    counts = {v: 0 for v in VERDICTS}
    mismatches = []
    for case in batch.cases:
        entry = latest.get(case.case_id)
        if entry is None:
            continue
        counts[entry.verdict] += 1
        if entry.verdict == VERDICT_MISMATCH:
            mismatches.append(case.case_id)
    done = sum(counts.values())
    return {
        "total_cases": len(batch.cases),
        "done": done,
        "pending": len(batch.cases) - done,
        "counts": counts,
        "mismatch_case_ids": mismatches,
    }


_PLACEHOLDER_PAGE = """<!doctype html>
<html><head><title>Audit</title></head>
<body>
<h1>Audit service</h1>
<p>No UI build found. The REST API is live under <code>/api/</code>:
cases at <code>/api/cases</code>, the tally at <code>/api/report</code>.</p>
</body></html>
"""


def create_app(batch: AuditBatch, store: MediaStore, records, log_path: str | Path,
               ui_dir: str | Path | None = None):
    """Build the FastAPI app serving cases, verdicts, images, and the UI."""
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import FileResponse, HTMLResponse
    from pydantic import BaseModel

    app = FastAPI(title="audit-service")
    log = VerdictLog(log_path)
    by_filename = {r.filename: r for r in records}

    class VerdictIn(BaseModel):
        verdict: str
        rationale: str = ""
        hidden_images: list[str] = []
        annotator: str = "anonymous"

    @app.get("/api/cases")
    def list_cases(status: str = "all"):
        if status not in ("all", STATUS_PENDING, STATUS_DONE):
            raise HTTPException(status_code=400, detail=f"unknown status filter {status!r}")
        statuses = case_status(batch, log)
        latest = log.latest()
        rows = []
        for case in batch.cases:
            st = statuses[case.case_id]
            if status != "all" and st != status:
                continue
            row = {"case_id": case.case_id, "qid": case.qid,
                   "entity_name": case.entity_name, "status": st}
            if case.case_id in latest:
                row["verdict"] = latest[case.case_id].verdict
            rows.append(row)
        return rows

    @app.get("/api/cases/{case_id}")
    def get_case(case_id: str):
        try:
            case = batch.case(case_id)
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        latest = log.latest().get(case_id)
        return {
            **case.to_dict(),
            "rubric": RUBRIC_TEXT,
            "status": STATUS_DONE if latest else STATUS_PENDING,
            "latest_verdict": latest.to_dict() if latest else None,
            "image_urls": [f"/api/images/{f}" for f in case.image_filenames],
        }

    @app.post("/api/cases/{case_id}/verdict")
    def post_verdict(case_id: str, body: VerdictIn):
        try:
            entry = submit_verdict(batch, log, case_id, body.verdict, body.rationale,
                                   body.hidden_images, body.annotator)
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"ok": True, "case_id": case_id, "status": STATUS_DONE,
                "timestamp": entry.timestamp}

    @app.get("/api/images/{filename}")
    def get_image(filename: str):
        if not FILENAME_RE.match(filename):
            raise HTTPException(status_code=400, detail="malformed image filename")
        record = by_filename.get(filename)
        if record is None:
            raise HTTPException(status_code=404, detail=f"no image {filename!r}")
        path = store.path_for(record)
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"bytes missing for {filename!r}")
        return FileResponse(path, media_type=record.mime)

    @app.get("/api/report")
    def get_report():
        return audit_report(batch, log)

    index = Path(ui_dir) / "index.html" if ui_dir else None

    @app.get("/", response_class=HTMLResponse)
    def root():
        if index is not None and index.exists():
            return index.read_text(encoding="utf-8")
        return _PLACEHOLDER_PAGE

    if ui_dir is not None and Path(ui_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
