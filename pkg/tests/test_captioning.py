import hashlib
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import png_bytes
from mmkg_enrich.captioning import (
    DEFAULT_PROMPT,
    DEFAULT_PROMPT_TEXT,
    Caption,
    PromptTemplate,
    caption_batch,
    caption_image,
    detect_degenerate,
    tokenize,
)
from mmkg_enrich.crawler import ImageCandidate, MediaStore
from mmkg_enrich.errors import PermanentError, TransientError
from mmkg_enrich.providers import (
    HttpCaptionProvider,
    HttpLLMProvider,
    MockCaptionProvider,
    MockLLMProvider,
)

PINNED_PROMPT_SHA = "72bdcabe30058577e5ade96b494ba45c48c4fa86371f49fc44f153737564ef29"


def _store_with_images(root, n=3):
    store = MediaStore(root)
    records = []
    for i in range(n):
        data = png_bytes(64 + i, 64, (i * 40, 10, 200))
        cand = ImageCandidate(image_url=f"http://x.test/{i}.png", page_url="p")
        records.append(store.add(cand, f"Q{i}", "retrieved", data))
    return store, records


# --- prompt pinning -------------------------------------------------


def test_default_prompt_bytes_are_pinned():
    assert hashlib.sha256(DEFAULT_PROMPT_TEXT.encode()).hexdigest() == PINNED_PROMPT_SHA
    assert DEFAULT_PROMPT.id == "describe-details-v1"
    assert DEFAULT_PROMPT.text == DEFAULT_PROMPT_TEXT


# --- degenerate screening -------------------------------------------


def test_tokenize_folds_case_and_strips_punctuation():
    assert tokenize("The cat, the CAT!") == ["the", "cat", "the", "cat"]
    assert tokenize("it's a dog's day") == ["it's", "a", "dog's", "day"]
    assert tokenize("...") == []


def test_empty_and_whitespace_are_degenerate():
    for text in ("", "   ", "\n\t"):
        check = detect_degenerate(text)
        assert check.degenerate and check.reason == "empty_output"


def test_repetition_loops_are_degenerate():
    check = detect_degenerate("the the the the the end")
    assert check.degenerate and check.reason == "token_repetition"
    # punctuation noise does not hide the loop
    assert detect_degenerate("yes, yes. Yes! yes?").degenerate


def test_normal_captions_pass():
    assert not detect_degenerate("a red bicycle leaning against a brick wall").degenerate
    # exactly at the threshold is allowed; the rule is strictly greater
    assert not detect_degenerate("dog dog cat cat").degenerate


def test_short_texts_never_flagged_for_repetition():
    assert not detect_degenerate("ha ha").degenerate
    assert not detect_degenerate("no no no").degenerate  # 3 tokens, below minimum


def test_threshold_is_validated_and_tunable():
    with pytest.raises(ValueError):
        detect_degenerate("x", threshold=0)
    with pytest.raises(ValueError):
        detect_degenerate("x", threshold=1.5)
    text = "blue blue sky with clouds"  # top ratio 2/5
    assert not detect_degenerate(text, threshold=0.5).degenerate
    assert detect_degenerate(text, threshold=0.3).degenerate


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.sampled_from(["sky", "blue", "over", "hill"]), min_size=0, max_size=12),
    st.floats(0.05, 1.0),
    st.floats(0.05, 1.0),
)
def test_lowering_threshold_never_unflags(words, t1, t2):
    lo, hi = sorted((t1, t2))
    text = " ".join(words)
    if detect_degenerate(text, hi).degenerate:
        assert detect_degenerate(text, lo).degenerate


# --- mock providers -------------------------------------------------


def test_mock_caption_is_deterministic_and_content_keyed():
    provider = MockCaptionProvider()
    a = png_bytes(64, 64)
    b = png_bytes(64, 64, (1, 2, 3))
    cap_a = provider.caption(a, DEFAULT_PROMPT_TEXT)
    assert cap_a == provider.caption(a, DEFAULT_PROMPT_TEXT)
    assert cap_a.startswith(f"MOCK CAPTION {hashlib.sha256(a).hexdigest()[:8]}:")
    assert cap_a != provider.caption(b, DEFAULT_PROMPT_TEXT)
    assert not detect_degenerate(cap_a).degenerate


def test_mock_llm_keeps_first_sixty_words():
    provider = MockLLMProvider()
    prompt = " ".join(f"w{i}" for i in range(100))
    out = provider.summarize(prompt)
    assert out.split() == [f"w{i}" for i in range(60)]


# --- single image ---------------------------------------------------


def test_caption_image_records_provenance(tmp_path):
    store, records = _store_with_images(tmp_path / "media", 1)
    caption = caption_image(records[0], store, MockCaptionProvider())
    assert caption.filename == records[0].filename
    assert caption.qid == records[0].qid
    assert caption.provider == "mock"
    assert caption.prompt_id == "describe-details-v1"
    assert not caption.degenerate
    assert Caption.from_dict(caption.to_dict()) == caption


class _ScriptedProvider:
    name = "scripted"

    def __init__(self, outputs):
        self.outputs = dict(outputs)  # sha256[:8] -> text or exception

    def caption(self, image_bytes, prompt):
        out = self.outputs.get(hashlib.sha256(image_bytes).hexdigest()[:8], "a scene")
        if isinstance(out, Exception):
            raise out
        return out


def test_caption_image_flags_degenerate_output(tmp_path):
    store, records = _store_with_images(tmp_path / "media", 1)
    key = records[0].sha256[:8]
    caption = caption_image(records[0], store, _ScriptedProvider({key: "no no no no"}))
    assert caption.degenerate and caption.degenerate_reason == "token_repetition"


# --- batches --------------------------------------------------------


def test_caption_batch_writes_rows_and_resumes(tmp_path):
    store, records = _store_with_images(tmp_path / "media", 3)
    out = tmp_path / "captions.jsonl"
    journal = tmp_path / "captions.journal"
    report = caption_batch(records, store, MockCaptionProvider(), out, journal)
    assert (report.captioned, report.resumed) == (3, 0)
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["filename"] for r in rows] == [r.filename for r in records]
    first = out.read_bytes()
    report = caption_batch(records, store, MockCaptionProvider(), out, journal)
    assert (report.captioned, report.resumed) == (0, 3)
    assert out.read_bytes() == first


def test_caption_batch_counts_degenerate_rows(tmp_path):
    store, records = _store_with_images(tmp_path / "media", 3)
    scripted = _ScriptedProvider({records[1].sha256[:8]: "beep beep beep beep"})
    report = caption_batch(records, store, scripted, tmp_path / "c.jsonl",
                           tmp_path / "c.journal")
    assert report.captioned == 3
    assert report.degenerate == 1
    rows = [json.loads(line) for line in (tmp_path / "c.jsonl").read_text().splitlines()]
    assert [r["degenerate"] for r in rows] == [False, True, False]


def test_permanent_failure_is_settled_but_transient_is_retried(tmp_path):
    store, records = _store_with_images(tmp_path / "media", 3)
    scripted = _ScriptedProvider({
        records[0].sha256[:8]: PermanentError("unsupported image"),
        records[2].sha256[:8]: TransientError("overloaded"),
    })
    out = tmp_path / "c.jsonl"
    journal = tmp_path / "c.journal"
    report = caption_batch(records, store, scripted, out, journal)
    assert (report.captioned, report.skipped) == (1, 2)
    # on resume: the permanent failure stays settled, the transient one retries
    report = caption_batch(records, store, _ScriptedProvider({}), out, journal)
    assert (report.captioned, report.resumed, report.skipped) == (1, 2, 0)
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert {r["filename"] for r in rows} == {records[1].filename, records[2].filename}


def test_new_prompt_id_reopens_the_batch(tmp_path):
    store, records = _store_with_images(tmp_path / "media", 2)
    out = tmp_path / "c.jsonl"
    journal = tmp_path / "c.journal"
    caption_batch(records, store, MockCaptionProvider(), out, journal)
    v2 = PromptTemplate(id="describe-details-v2", text="Describe everything.")
    report = caption_batch(records, store, MockCaptionProvider(), out, journal, prompt=v2)
    assert (report.captioned, report.resumed) == (2, 0)
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["prompt_id"] for r in rows] == ["describe-details-v1"] * 2 + [
        "describe-details-v2"] * 2


# --- HTTP providers -------------------------------------------------


def test_http_caption_round_trips_image_bytes(stub_provider):
    provider = HttpCaptionProvider(stub_provider.url)
    data = png_bytes(77, 33)
    text = provider.caption(data, "describe it")
    assert text == f"stub caption {hashlib.sha256(data).hexdigest()[:6]} of a scene"
    sent = stub_provider.caption_calls[-1]
    import base64

    assert base64.b64decode(sent["image_b64"]) == data
    assert sent["prompt"] == "describe it"


def test_http_caption_retries_through_outage(stub_provider):
    stub_provider.caption_failures = 2
    provider = HttpCaptionProvider(stub_provider.url, retries=3)
    text = provider.caption(b"img", "p")
    assert text.startswith("stub caption")
    assert len(stub_provider.caption_calls) == 3


def test_http_caption_exhausted_retries_raise_transient(stub_provider):
    stub_provider.caption_failures = 10
    provider = HttpCaptionProvider(stub_provider.url, retries=1)
    with pytest.raises(TransientError):
        provider.caption(b"img", "p")
    assert len(stub_provider.caption_calls) == 2


def test_http_caption_rejection_is_permanent(stub_provider):
    stub_provider.reject_captions = True
    provider = HttpCaptionProvider(stub_provider.url, retries=3)
    with pytest.raises(PermanentError):
        provider.caption(b"img", "p")
    assert len(stub_provider.caption_calls) == 1  # 4xx is not retried


def test_http_summarize_uses_queued_response(stub_provider):
    stub_provider.summarize_responses.append("A tidy paragraph.")
    provider = HttpLLMProvider(stub_provider.url)
    assert provider.summarize("whatever prompt") == "A tidy paragraph."
    assert stub_provider.summarize_calls[-1] == {"prompt": "whatever prompt"}


def test_http_summarize_retries_then_succeeds(stub_provider):
    stub_provider.summarize_failures = 1
    stub_provider.summarize_responses.append("Recovered.")
    provider = HttpLLMProvider(stub_provider.url, retries=2)
    assert provider.summarize("p") == "Recovered."
    assert len(stub_provider.summarize_calls) == 2


def test_response_without_text_field_is_permanent(monkeypatch):
    class FakeResponse:
        status_code = 200

        @staticmethod
        def json():
            return {"output": "wrong shape"}

    monkeypatch.setattr("mmkg_enrich.providers.requests.post",
                        lambda *args, **kwargs: FakeResponse)
    with pytest.raises(PermanentError, match="missing 'text'"):
        HttpLLMProvider("http://fake.test").summarize("p")
