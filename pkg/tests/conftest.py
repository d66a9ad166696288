"""Shared fixtures: in-process HTTP stubs and dataset builders.

Everything runs offline. The stub site plays the role of the wiki that
the crawler talks to; the stub provider server speaks the caption/LLM
wire protocol. Both record requests so tests can assert on traffic.
"""

from __future__ import annotations

import io
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import unquote, urlparse

import pytest
from PIL import Image

from mmkg_enrich.crawler import image_filename
from mmkg_enrich.util import sha256_hex, write_jsonl


def png_bytes(width=100, height=80, color=(200, 30, 30)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="PNG")
    return buf.getvalue()


def jpeg_bytes(width=100, height=80, color=(30, 30, 200)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="JPEG")
    return buf.getvalue()


class StubSite:
    """Tiny wiki-shaped site: /wiki/<Title> pages and /media/* files.

    ``requests`` records (path, monotonic time) for every hit, which is
    how politeness and journal-resume tests observe traffic.
    """

    def __init__(self):
        self.pages: dict[str, str] = {}
        self.files: dict[str, tuple[bytes, str]] = {}
        self.redirects: dict[str, str] = {}
        self.flaky_budget: dict[str, int] = {}
        self.requests: list[tuple[str, float]] = []
        self.server: ThreadingHTTPServer | None = None

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    @property
    def page_template(self) -> str:
        return self.url + "/wiki/{title}"

    def add_page(self, title: str, html: str) -> None:
        self.pages[title.replace(" ", "_")] = html

    def add_file(self, path: str, data: bytes, content_type: str = "image/png") -> None:
        self.files[path] = (data, content_type)

    def reset_log(self) -> None:
        self.requests = []


def _make_handler(site: StubSite):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_GET(self):
            site.requests.append((self.path, time.monotonic()))
            path = urlparse(self.path).path
            budget = site.flaky_budget.get(path, 0)
            if budget > 0:
                site.flaky_budget[path] = budget - 1
                self.send_response(503)
                self.end_headers()
                return
            if path in site.redirects:
                self.send_response(302)
                self.send_header("Location", site.redirects[path])
                self.end_headers()
                return
            if path.startswith("/wiki/"):
                title = unquote(path[len("/wiki/"):])
                html = site.pages.get(title)
                if html is None:
                    self.send_response(404)
                    self.end_headers()
                    return
                body = html.encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "text/html; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
            if path in site.files:
                data, ctype = site.files[path]
                self.send_response(200)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)
                return
            self.send_response(404)
            self.end_headers()

    return Handler


@pytest.fixture
def stub_site():
    site = StubSite()
    server = ThreadingHTTPServer(("127.0.0.1", 0), _make_handler(site))
    site.server = server
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield site
    server.shutdown()
    server.server_close()


class StubProviderState:
    """Caption/summarize provider stub with scriptable behavior."""

    def __init__(self):
        self.caption_failures = 0  # 503s to emit before succeeding
        self.summarize_failures = 0
        self.reject_captions = False  # emit 400s
        self.summarize_responses: list[str] = []  # queued; else default echo
        self.caption_calls: list[dict] = []
        self.summarize_calls: list[dict] = []
        self.server: ThreadingHTTPServer | None = None

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"


def _make_provider_handler(state: StubProviderState):
    import base64

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _reply(self, code: int, payload: dict | None = None):
            body = json.dumps(payload or {}).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            payload = json.loads(self.rfile.read(length) or b"{}")
            if self.path == "/caption":
                state.caption_calls.append(payload)
                if state.caption_failures > 0:
                    state.caption_failures -= 1
                    self._reply(503)
                    return
                if state.reject_captions:
                    self._reply(400)
                    return
                image = base64.b64decode(payload["image_b64"])
                self._reply(200, {"text": f"stub caption {sha256_hex(image)[:6]} of a scene"})
            elif self.path == "/summarize":
                state.summarize_calls.append(payload)
                if state.summarize_failures > 0:
                    state.summarize_failures -= 1
                    self._reply(503)
                    return
                if state.summarize_responses:
                    self._reply(200, {"text": state.summarize_responses.pop(0)})
                    return
                self._reply(200, {"text": " ".join(payload["prompt"].split()[:40])})
            else:
                self._reply(404)

    return Handler


@pytest.fixture
def stub_provider():
    state = StubProviderState()
    server = ThreadingHTTPServer(("127.0.0.1", 0), _make_provider_handler(state))
    state.server = server
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield state
    server.shutdown()
    server.server_close()


def build_dataset_dir(root: Path, n_entities: int = 6, originals: int = 0,
                      descriptions: bool = True) -> Path:
    """Write a small valid dataset directory.

    Entities are E0..E{n-1} with qids Q100+i. Optionally gives the first
    ``originals`` entities one original-source image with real PNG bytes
    under media/original/.
    """
    root.mkdir(parents=True, exist_ok=True)
    entities = []
    for i in range(n_entities):
        desc = f"thing number {i} painted in shade {i % 3}" if descriptions else None
        entities.append({"id": f"E{i}", "qid": f"Q{100 + i}", "name": f"Thing {i}",
                         "description": desc})
    write_jsonl(root / "entities.jsonl", entities)

    def tsv(name, triples):
        with open(root / name, "w", encoding="utf-8") as fh:
            for h, r, t in triples:
                fh.write(f"{h}\t{r}\t{t}\n")

    train = [(f"E{i}", "linked_to", f"E{(i + 1) % n_entities}") for i in range(n_entities)]
    train += [(f"E{i}", "similar_to", f"E{(i + 2) % n_entities}")
              for i in range(0, n_entities, 2)]
    tsv("train.tsv", train)
    tsv("valid.tsv", [("E0", "linked_to", f"E{n_entities - 1}")])
    tsv("test.tsv", [(f"E{1 % n_entities}", "linked_to", f"E{n_entities - 1}"),
                     (f"E{2 % n_entities}", "similar_to", "E0")])

    if originals:
        rows = []
        media = root / "media" / "original"
        media.mkdir(parents=True, exist_ok=True)
        for i in range(min(originals, n_entities)):
            qid = f"Q{100 + i}"
            data = png_bytes(120, 90, ((i * 40) % 255, 80, 120))
            filename = image_filename(qid, 0, "image/png")
            (media / filename).write_bytes(data)
            rows.append({
                "qid": qid, "index": 0, "filename": filename, "source": "original",
                "page_url": "", "image_url": f"seed://{qid}", "author": None,
                "date": None, "width": 120, "height": 90, "mime": "image/png",
                "sha256": sha256_hex(data),
            })
        write_jsonl(root / "images.jsonl", rows)
    return root


def entity_page_html(base_url: str, image_paths: list[str], extras: str = "") -> str:
    imgs = "\n".join(
        f'<img src="{p}" width="120" height="90" alt="picture">' for p in image_paths
    )
    return f"<html><body><h1>Page</h1>\n{imgs}\n{extras}</body></html>"


def oracle_rank(scores, true_idx: int, allowed=None) -> int:
    """Reference rank via sort-and-scan: floor of the mean rank of the
    tied block. Deliberately a different code path from the library
    (sorting and first/last positions instead of comparison counts)."""
    considered = [float(s) for i, s in enumerate(scores)
                  if i == true_idx or allowed is None or allowed[i]]
    ordered = sorted(considered, reverse=True)
    target = float(scores[true_idx])
    first = ordered.index(target) + 1
    last = len(ordered) - ordered[::-1].index(target)
    return (first + last) // 2


def build_text_informative_kg(groups: int = 5, train_heads: int = 4):
    """A KG where held-out heads are only predictable through text.

    Each group g has a hub tail T{g} and member heads whose descriptions
    share a distinctive token. Test heads X{g} never appear in training,
    so their structural embeddings stay at random init; their
    descriptions match the trained members of their group exactly.
    """
    from mmkg_enrich.kgdata import Dataset, Entity, Triple

    entities, train, valid, test = [], [], [], []
    for g in range(groups):
        entities.append(Entity(id=f"T{g}", name=f"hub {g}", qid=f"Q{9000 + g}",
                               description=f"hub object token{g} cluster"))
        for j in range(train_heads):
            entities.append(Entity(id=f"H{g}_{j}", name=f"member {g}.{j}",
                                   qid=f"Q{100 + g * 10 + j}",
                                   description=f"member object token{g} cluster"))
            triple = Triple(f"H{g}_{j}", "same_group", f"T{g}")
            if g == 0 and j == train_heads - 1:
                valid.append(triple)
            else:
                train.append(triple)
        entities.append(Entity(id=f"X{g}", name=f"held out {g}", qid=f"Q{500 + g}",
                               description=f"member object token{g} cluster"))
        test.append(Triple(f"X{g}", "same_group", f"T{g}"))
    return Dataset(root=None, entities=entities, train=train, valid=valid, test=test)
