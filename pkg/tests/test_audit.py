import json

import pytest
from fastapi.testclient import TestClient

from conftest import build_dataset_dir, png_bytes
from mmkg_enrich.audit import (
    RUBRIC_TEXT,
    AuditBatch,
    VerdictLog,
    audit_report,
    case_status,
    create_app,
    sample_cases,
    submit_verdict,
)
from mmkg_enrich.crawler import ImageCandidate, MediaStore
from mmkg_enrich.errors import NotFoundError
from mmkg_enrich.fusion import FusedSummary
from mmkg_enrich.kgdata import load_dataset
from mmkg_enrich.util import stable_hash


def _summaries(qids, variant="fusion"):
    return [FusedSummary(qid=q, variant=variant, text=f"summary about {q}",
                         model="mock", input_caption_count=1) for q in qids]


def _setup(tmp_path, n_entities=6, with_images=5):
    """Dataset where the first ``with_images`` entities have one image."""
    root = build_dataset_dir(tmp_path / "d", n_entities=n_entities, originals=with_images)
    return load_dataset(root)


# --- sampling -------------------------------------------------------


def test_sampling_is_deterministic_per_seed(tmp_path):
    dataset = _setup(tmp_path)
    summaries = _summaries([f"Q{100 + i}" for i in range(5)])
    a = sample_cases(dataset, summaries, 3, seed=7)
    b = sample_cases(dataset, summaries, 3, seed=7)
    assert [c.qid for c in a.cases] == [c.qid for c in b.cases]
    c = sample_cases(dataset, summaries, 3, seed=8)
    assert [x.qid for x in a.cases] != [x.qid for x in c.cases]


def test_case_ids_are_stable_functions_of_qid_and_seed(tmp_path):
    dataset = _setup(tmp_path)
    summaries = _summaries(["Q100", "Q101"])
    batch = sample_cases(dataset, summaries, 2, seed=3)
    for case in batch.cases:
        assert case.case_id == stable_hash(f"{case.qid}|3")
        assert len(case.case_id) == 12


def test_eligibility_needs_summary_and_image(tmp_path):
    dataset = _setup(tmp_path, n_entities=6, with_images=2)
    # Q104 has a summary but no image; Q101 has an image but no summary
    summaries = _summaries(["Q100", "Q104"])
    batch = sample_cases(dataset, summaries, 1, seed=0)
    assert batch.cases[0].qid == "Q100"
    with pytest.raises(ValueError, match="only 1 entities are eligible"):
        sample_cases(dataset, summaries, 2, seed=0)


def test_non_fusion_rows_do_not_make_entities_eligible(tmp_path):
    dataset = _setup(tmp_path, with_images=3)
    summaries = _summaries(["Q100"], variant="g_o") + _summaries(["Q101"])
    batch = sample_cases(dataset, summaries, 1, seed=0)
    assert batch.cases[0].qid == "Q101"


def test_negative_sample_size_rejected(tmp_path):
    dataset = _setup(tmp_path)
    with pytest.raises(ValueError):
        sample_cases(dataset, _summaries(["Q100"]), -1, seed=0)


def test_batch_round_trips_through_json(tmp_path):
    dataset = _setup(tmp_path)
    batch = sample_cases(dataset, _summaries(["Q100", "Q101", "Q102"]), 2, seed=1)
    path = tmp_path / "audit_batch.json"
    batch.save(path)
    data = json.loads(path.read_text())
    assert data["rubric"] == RUBRIC_TEXT  # annotators see the instructions
    loaded = AuditBatch.load(path)
    assert loaded.seed == batch.seed
    assert loaded.cases == batch.cases
    with pytest.raises(NotFoundError):
        loaded.case("nope")


# --- verdict log ----------------------------------------------------


def _batch(tmp_path, n=3):
    dataset = _setup(tmp_path)
    qids = [f"Q{100 + i}" for i in range(5)]
    return dataset, sample_cases(dataset, _summaries(qids), n, seed=2)


def test_submit_validates_inputs(tmp_path):
    dataset, batch = _batch(tmp_path)
    log = VerdictLog(tmp_path / "verdicts.jsonl")
    case = batch.cases[0]
    with pytest.raises(NotFoundError):
        submit_verdict(batch, log, "missing-case", "Match")
    with pytest.raises(ValueError, match="verdict must be one of"):
        submit_verdict(batch, log, case.case_id, "Maybe")
    with pytest.raises(ValueError, match="rationale is required"):
        submit_verdict(batch, log, case.case_id, "Mismatch")
    with pytest.raises(ValueError, match="not part of case"):
        submit_verdict(batch, log, case.case_id, "Match",
                       hidden_images=["Q999_0.png"])
    # Match without rationale is fine; log stays empty until a valid submit
    assert log.entries() == []
    submit_verdict(batch, log, case.case_id, "Match")
    assert len(log.entries()) == 1


def test_log_is_append_only_and_latest_wins(tmp_path):
    dataset, batch = _batch(tmp_path)
    log = VerdictLog(tmp_path / "verdicts.jsonl")
    case = batch.cases[0]
    submit_verdict(batch, log, case.case_id, "Mismatch", rationale="wrong colors",
                   timestamp="2026-01-01T10:00:00+00:00")
    submit_verdict(batch, log, case.case_id, "Match",
                   timestamp="2026-01-01T11:00:00+00:00")
    assert len(log.entries()) == 2  # history preserved
    assert log.latest()[case.case_id].verdict == "Match"
    # equal timestamps: the later line wins
    submit_verdict(batch, log, case.case_id, "Uncertain", rationale="hard to say",
                   timestamp="2026-01-01T11:00:00+00:00")
    assert log.latest()[case.case_id].verdict == "Uncertain"
    # an out-of-order old timestamp does not regress the state
    submit_verdict(batch, log, case.case_id, "Mismatch", rationale="stale",
                   timestamp="2026-01-01T09:00:00+00:00")
    assert log.latest()[case.case_id].verdict == "Uncertain"


def test_status_and_report(tmp_path):
    dataset, batch = _batch(tmp_path, n=3)
    log = VerdictLog(tmp_path / "verdicts.jsonl")
    c0, c1, c2 = batch.cases
    submit_verdict(batch, log, c0.case_id, "Match")
    submit_verdict(batch, log, c1.case_id, "Mismatch", rationale="images show a car")
    statuses = case_status(batch, log)
    assert statuses[c0.case_id] == "done"
    assert statuses[c2.case_id] == "pending"
    report = audit_report(batch, log)
    assert report["total_cases"] == 3
    assert report["done"] == 2 and report["pending"] == 1
    assert report["counts"] == {"Match": 1, "Mismatch": 1, "Uncertain": 0}
    assert report["mismatch_case_ids"] == [c1.case_id]


def test_report_replays_identically_from_disk(tmp_path):
    dataset, batch = _batch(tmp_path)
    log_path = tmp_path / "verdicts.jsonl"
    log = VerdictLog(log_path)
    for case, verdict in zip(batch.cases, ("Match", "Uncertain", "Match")):
        submit_verdict(batch, log, case.case_id, verdict, rationale="r")
    before = audit_report(batch, log)
    assert audit_report(batch, VerdictLog(log_path)) == before


# --- REST service ---------------------------------------------------


def _service(tmp_path, ui_dir=None):
    dataset = _setup(tmp_path, n_entities=4, with_images=3)
    store = MediaStore(tmp_path / "d" / "media", dataset.images)
    batch = sample_cases(dataset, _summaries(["Q100", "Q101", "Q102"]), 3, seed=5)
    app = create_app(batch, store, dataset.images, tmp_path / "verdicts.jsonl",
                     ui_dir=ui_dir)
    return dataset, batch, TestClient(app)


def test_case_listing_and_status_filter(tmp_path):
    dataset, batch, client = _service(tmp_path)
    rows = client.get("/api/cases").json()
    assert [r["case_id"] for r in rows] == [c.case_id for c in batch.cases]
    assert all(r["status"] == "pending" for r in rows)
    done = batch.cases[0].case_id
    resp = client.post(f"/api/cases/{done}/verdict", json={"verdict": "Match"})
    assert resp.status_code == 200 and resp.json()["status"] == "done"
    pending = client.get("/api/cases", params={"status": "pending"}).json()
    assert done not in {r["case_id"] for r in pending}
    finished = client.get("/api/cases", params={"status": "done"}).json()
    assert [r["case_id"] for r in finished] == [done]
    assert finished[0]["verdict"] == "Match"
    assert client.get("/api/cases", params={"status": "bogus"}).status_code == 400


def test_case_detail_payload(tmp_path):
    dataset, batch, client = _service(tmp_path)
    case = batch.cases[0]
    detail = client.get(f"/api/cases/{case.case_id}").json()
    assert detail["qid"] == case.qid
    assert detail["summary_text"] == case.summary_text
    assert detail["rubric"] == RUBRIC_TEXT
    assert detail["latest_verdict"] is None
    assert detail["image_urls"] == [f"/api/images/{f}" for f in case.image_filenames]
    assert client.get("/api/cases/does-not-exist").status_code == 404


def test_verdict_endpoint_maps_errors(tmp_path):
    dataset, batch, client = _service(tmp_path)
    case = batch.cases[0]
    assert client.post("/api/cases/nope/verdict",
                       json={"verdict": "Match"}).status_code == 404
    bad = client.post(f"/api/cases/{case.case_id}/verdict", json={"verdict": "Shrug"})
    assert bad.status_code == 400
    bad = client.post(f"/api/cases/{case.case_id}/verdict", json={"verdict": "Mismatch"})
    assert bad.status_code == 400 and "rationale" in bad.json()["detail"]
    ok = client.post(f"/api/cases/{case.case_id}/verdict",
                     json={"verdict": "Mismatch", "rationale": "colors are wrong",
                           "hidden_images": [case.image_filenames[0]],
                           "annotator": "sam"})
    assert ok.status_code == 200
    detail = client.get(f"/api/cases/{case.case_id}").json()
    assert detail["latest_verdict"]["annotator"] == "sam"
    assert detail["latest_verdict"]["hidden_images"] == [case.image_filenames[0]]


def test_image_endpoint_serves_bytes_with_mime(tmp_path):
    dataset, batch, client = _service(tmp_path)
    filename = batch.cases[0].image_filenames[0]
    resp = client.get(f"/api/images/{filename}")
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "image/png"
    assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"
    assert client.get("/api/images/../../etc/passwd").status_code in (400, 404)
    assert client.get("/api/images/evil.png").status_code == 400  # fails the grammar
    assert client.get("/api/images/Q999_0.png").status_code == 404


def test_report_endpoint_tallies(tmp_path):
    dataset, batch, client = _service(tmp_path)
    for case, verdict in zip(batch.cases, ("Match", "Mismatch")):
        client.post(f"/api/cases/{case.case_id}/verdict",
                    json={"verdict": verdict, "rationale": "because"})
    report = client.get("/api/report").json()
    assert report["done"] == 2 and report["pending"] == 1
    assert report["counts"]["Mismatch"] == 1


def test_root_serves_placeholder_without_ui(tmp_path):
    dataset, batch, client = _service(tmp_path)
    resp = client.get("/")
    assert resp.status_code == 200
    assert "REST API is live" in resp.text


def test_root_and_static_mount_with_ui_build(tmp_path):
    ui = tmp_path / "ui"
    ui.mkdir()
    (ui / "index.html").write_text("<html><body>real ui</body></html>")
    (ui / "app.js").write_text("console.log('hi')")
    dataset, batch, client = _service(tmp_path, ui_dir=ui)
    assert "real ui" in client.get("/").text
    assert client.get("/ui/app.js").text == "console.log('hi')"


def test_verdicts_survive_service_restart(tmp_path):
    dataset = _setup(tmp_path, n_entities=4, with_images=3)
    store = MediaStore(tmp_path / "d" / "media", dataset.images)
    batch = sample_cases(dataset, _summaries(["Q100", "Q101"]), 2, seed=1)
    log_path = tmp_path / "verdicts.jsonl"
    client = TestClient(create_app(batch, store, dataset.images, log_path))
    case = batch.cases[0]
    client.post(f"/api/cases/{case.case_id}/verdict", json={"verdict": "Match"})
    # a fresh app over the same log sees the earlier verdict
    client2 = TestClient(create_app(batch, store, dataset.images, log_path))
    detail = client2.get(f"/api/cases/{case.case_id}").json()
    assert detail["status"] == "done"
    assert detail["latest_verdict"]["verdict"] == "Match"
