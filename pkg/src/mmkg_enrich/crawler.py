"""Polite image crawler for entity pages.

Given a normalized dataset, fetch each entity's wiki-style page, pull
image references out of the HTML, filter them against a policy, and
store accepted images under a content-addressed manifest. Crawls are
resumable through an append-only journal and idempotent at the store
level: re-running a finished crawl downloads nothing.
"""

from __future__ import annotations

import io
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from html.parser import HTMLParser
from pathlib import Path
from typing import TYPE_CHECKING, Iterable
from urllib.parse import quote, urljoin, urlparse

import requests
from PIL import Image

from .errors import NotFoundError, PermanentError, TransientError
from .util import Journal, append_jsonl, sha256_hex

if TYPE_CHECKING:
    from .kgdata import Dataset, Entity

log = logging.getLogger(__name__)

USER_AGENT = "mmkg-enrich/0.1 (research image crawler; contact: ops@mmkg-enrich.invalid)"

FILENAME_RE = re.compile(r"^(Q[0-9]+|X[0-9a-f]{12})_[0-9]+\.(jpg|png|gif|webp)$")

MIME_TO_EXT = {
    "image/jpeg": "jpg",
    "image/png": "png",
    "image/gif": "gif",
    "image/webp": "webp",
}
EXT_TO_MIME = {
    "jpg": "image/jpeg",
    "jpeg": "image/jpeg",
    "png": "image/png",
    "gif": "image/gif",
    "webp": "image/webp",
    "svg": "image/svg+xml",
    "tif": "image/tiff",
    "tiff": "image/tiff",
    "bmp": "image/bmp",
    "ico": "image/x-icon",
}
PIL_FORMAT_TO_MIME = {
    "JPEG": "image/jpeg",
    "PNG": "image/png",
    "GIF": "image/gif",
    "WEBP": "image/webp",
}

SOURCE_ORIGINAL = "original"
SOURCE_RETRIEVED = "retrieved"


def image_filename(qid: str, index: int, mime: str) -> str:
    ext = MIME_TO_EXT.get(mime)
    if ext is None:
        raise ValueError(f"no canonical extension for mime {mime!r}")
    return f"{qid}_{index}.{ext}"


def parse_image_filename(filename: str) -> tuple[str, int, str]:
    """Split a manifest filename into (qid, index, extension)."""
    m = FILENAME_RE.match(filename)
    if not m:
        raise ValueError(f"filename {filename!r} does not match the manifest grammar")
    qid, ext = m.group(1), m.group(2)
    index = int(filename[len(qid) + 1 : -(len(ext) + 1)])
    return qid, index, ext


@dataclass(frozen=True)
class ImageCandidate:
    """An image reference extracted from a page, prior to download."""

    image_url: str
    page_url: str
    alt: str | None = None
    width: int | None = None
    height: int | None = None
    mime: str | None = None
    author: str | None = None
    date: str | None = None


@dataclass(frozen=True)
class ImageRecord:
    """One stored image; serialized as a line of images.jsonl."""

    qid: str
    index: int
    filename: str
    source: str
    page_url: str
    image_url: str
    author: str | None
    date: str | None
    width: int
    height: int
    mime: str
    sha256: str

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "index": self.index,
            "filename": self.filename,
            "source": self.source,
            "page_url": self.page_url,
            "image_url": self.image_url,
            "author": self.author,
            "date": self.date,
            "width": self.width,
            "height": self.height,
            "mime": self.mime,
            "sha256": self.sha256,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "ImageRecord":
        if not FILENAME_RE.match(row.get("filename", "")):
            raise ValueError(f"bad manifest filename {row.get('filename')!r}")
        return cls(
            qid=row["qid"],
            index=int(row["index"]),
            filename=row["filename"],
            source=row["source"],
            page_url=row.get("page_url", ""),
            image_url=row.get("image_url", ""),
            author=row.get("author"),
            date=row.get("date"),
            width=int(row["width"]),
            height=int(row["height"]),
            mime=row["mime"],
            sha256=row["sha256"],
        )

    def replace(self, **changes) -> "ImageRecord":
        return replace(self, **changes)


@dataclass(frozen=True)
class FilterPolicy:
    min_width: int = 64
    min_height: int = 64
    allowed_mimes: frozenset[str] = frozenset(MIME_TO_EXT)
    max_images_per_entity: int = 25
    blocked_url_patterns: tuple[str, ...] = ()


@dataclass(frozen=True)
class Politeness:
    delay_ms: int = 1000
    retries: int = 3
    backoff_base_s: float = 0.5
    user_agent: str = USER_AGENT
    timeout_s: float = 20.0


@dataclass(frozen=True)
class Rejection:
    candidate: ImageCandidate
    reason: str  # too_small | bad_mime | blocked_url | over_cap


@dataclass(frozen=True)
class FilterResult:
    accepted: list[ImageCandidate]
    rejected: list[Rejection]


@dataclass
class PageDocument:
    url: str
    html: str
    status: int
    retries_used: int = 0


# Wiki-style pages mark disambiguation content with one of these ids.
_DISAMBIG_MARKERS = ("disambigbox", "mw-disambig", "dmbox-body")


class PageFetcher:
    """HTTP fetcher with per-host politeness, retries, and redirects.

    The page URL is built from a template with a ``{title}`` slot so
    tests and mirrors can point it anywhere.
    """

    def __init__(
        self,
        url_template: str = "https://en.wikipedia.org/wiki/{title}",
        politeness: Politeness | None = None,
        session: requests.Session | None = None,
    ):
        self.url_template = url_template
        self.politeness = politeness or Politeness()
        self.session = session or requests.Session()
        self.session.headers["User-Agent"] = self.politeness.user_agent
        self._host_locks: dict[str, threading.Lock] = {}
        self._last_sent: dict[str, float] = {}
        self._state_lock = threading.Lock()

    def _host_lock(self, host: str) -> threading.Lock:
        with self._state_lock:
            return self._host_locks.setdefault(host, threading.Lock())

    def _throttled_get(self, url: str) -> requests.Response:
        host = urlparse(url).netloc
        delay = self.politeness.delay_ms / 1000.0
        last_exc: Exception | None = None
        with self._host_lock(host):
            for attempt in range(self.politeness.retries + 1):
                wait = self._last_sent.get(host, -delay) + delay - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                self._last_sent[host] = time.monotonic()
                try:
                    resp = self.session.get(
                        url, timeout=self.politeness.timeout_s, allow_redirects=True
                    )
                except (requests.ConnectionError, requests.Timeout) as exc:
                    last_exc = exc
                    resp = None
                if resp is not None and resp.status_code < 500:
                    resp.attempt = attempt  # type: ignore[attr-defined]
                    return resp
                if resp is not None:
                    last_exc = TransientError(f"{url}: server returned {resp.status_code}")
                if attempt < self.politeness.retries:
                    time.sleep(self.politeness.backoff_base_s * (2**attempt))
        raise TransientError(f"{url}: giving up after {self.politeness.retries + 1} attempts") from (
            last_exc if isinstance(last_exc, Exception) else None
        )

    def page_url(self, title: str) -> str:
        return self.url_template.format(title=quote(title.replace(" ", "_")))

    def fetch_entity_page(self, name: str) -> PageDocument:
        """Fetch the page for an entity name. 404 and disambiguation-only
        pages raise NotFoundError; persistent server trouble raises
        TransientError after retries."""
        url = self.page_url(name)
        resp = self._throttled_get(url)
        if resp.status_code == 404:
            raise NotFoundError(f"no page for {name!r} at {url}")
        if resp.status_code >= 400:
            raise PermanentError(f"{url}: server returned {resp.status_code}")
        html = resp.text
        if any(marker in html for marker in _DISAMBIG_MARKERS):
            raise NotFoundError(f"page for {name!r} is a disambiguation page")
        return PageDocument(url=str(resp.url), html=html, status=resp.status_code,
                            retries_used=getattr(resp, "attempt", 0))

    def fetch_bytes(self, url: str) -> bytes:
        resp = self._throttled_get(url)
        if resp.status_code == 404:
            raise NotFoundError(f"{url}: not found")
        if resp.status_code >= 400:
            raise PermanentError(f"{url}: server returned {resp.status_code}")
        return resp.content


class _ImageTagParser(HTMLParser):
    """Collects img tags, absolutizing URLs and keeping figure metadata."""

    def __init__(self, base_url: str):
        super().__init__(convert_charrefs=True)
        self.base_url = base_url
        self.candidates: list[dict] = []
        self._figure_depth = 0
        self._figure_images: list[int] = []
        self._in_figcaption = False
        self._caption_parts: list[str] = []

    def handle_starttag(self, tag, attrs):
        attrs = dict(attrs)
        if tag == "figure":
            self._figure_depth += 1
            self._figure_images = []
            self._caption_parts = []
        elif tag == "figcaption":
            self._in_figcaption = True
        elif tag == "img":
            src = attrs.get("src")
            if not src:
                return
            url = urljoin(self.base_url, src)
            if urlparse(url).scheme not in ("http", "https"):
                return
            cand = {
                "image_url": url,
                "alt": attrs.get("alt") or None,
                "width": _int_or_none(attrs.get("width")),
                "height": _int_or_none(attrs.get("height")),
            }
            self.candidates.append(cand)
            if self._figure_depth:
                self._figure_images.append(len(self.candidates) - 1)

    def handle_data(self, data):
        if self._in_figcaption:
            self._caption_parts.append(data)

    def handle_endtag(self, tag):
        if tag == "figcaption":
            self._in_figcaption = False
        elif tag == "figure" and self._figure_depth:
            meta = _parse_caption_metadata("".join(self._caption_parts))
            for idx in self._figure_images:
                self.candidates[idx].update(meta)
            self._figure_depth -= 1
            self._figure_images = []


def _int_or_none(value: str | None) -> int | None:
    if value is None:
        return None
    value = value.strip().rstrip("px")
    return int(value) if value.isdigit() else None


def _parse_caption_metadata(text: str) -> dict:
    """Pull author=... and date=... pairs out of figcaption text."""
    meta = {}
    for key in ("author", "date"):
        m = re.search(rf"\b{key}=([^\s;,]+)", text)
        if m:
            meta[key] = m.group(1)
    return meta


def _guess_mime(url: str) -> str | None:
    path = urlparse(url).path
    ext = path.rsplit(".", 1)[-1].lower() if "." in path else ""
    return EXT_TO_MIME.get(ext)


def extract_images(page: PageDocument) -> list[ImageCandidate]:
    """All img references on a page with resolvable absolute URLs, in
    document order. Unparseable markup yields an empty list, not an error."""
    parser = _ImageTagParser(page.url)
    try:
        parser.feed(page.html)
        parser.close()
    except Exception as exc:  # html.parser is lenient; belt and braces
        log.warning("failed to parse %s: %s", page.url, exc)
        return []
    return [
        ImageCandidate(
            image_url=c["image_url"],
            page_url=page.url,
            alt=c.get("alt"),
            width=c.get("width"),
            height=c.get("height"),
            mime=_guess_mime(c["image_url"]),
            author=c.get("author"),
            date=c.get("date"),
        )
        for c in parser.candidates
    ]


def filter_images(candidates: Iterable[ImageCandidate], policy: FilterPolicy) -> FilterResult:
    """Partition candidates into accepted and rejected.

    Every input lands in exactly one bucket and each rejection carries a
    single primary reason, checked in a fixed order: too_small, bad_mime,
    blocked_url. The per-entity cap is applied after the other filters,
    preserving document order; overflow is rejected as over_cap.
    """
    survivors: list[ImageCandidate] = []
    rejected: list[Rejection] = []
    for cand in candidates:
        if (cand.width is not None and cand.width < policy.min_width) or (
            cand.height is not None and cand.height < policy.min_height
        ):
            rejected.append(Rejection(cand, "too_small"))
        elif cand.mime not in policy.allowed_mimes:
            rejected.append(Rejection(cand, "bad_mime"))
        elif any(pat in cand.image_url for pat in policy.blocked_url_patterns):
            rejected.append(Rejection(cand, "blocked_url"))
        else:
            survivors.append(cand)
    accepted = survivors[: policy.max_images_per_entity]
    rejected.extend(Rejection(c, "over_cap") for c in survivors[policy.max_images_per_entity :])
    return FilterResult(accepted=accepted, rejected=rejected)


class MediaStore:
    """Filesystem store for image bytes, one subdirectory per source.

    Index state is seeded from existing manifest records so re-crawls
    continue numbering where they left off and can dedup against what
    is already on disk. Indices count per entity across sources, which
    keeps filenames unique per entity; filename is the join key for
    captions and the audit image endpoint.
    """

    def __init__(self, root: str | Path, records: Iterable[ImageRecord] = ()):
        self.root = Path(root)
        self._next_index: dict[str, int] = {}
        self._by_url: dict[tuple[str, str], ImageRecord] = {}
        self._by_sha: dict[tuple[str, str], ImageRecord] = {}
        self._lock = threading.Lock()
        for record in records:
            self._register(record)

    def _register(self, record: ImageRecord) -> None:
        self._next_index[record.qid] = max(self._next_index.get(record.qid, 0),
                                           record.index + 1)
        self._by_url[(record.qid, record.image_url)] = record
        self._by_sha[(record.qid, record.sha256)] = record

    def existing_for_url(self, qid: str, image_url: str) -> ImageRecord | None:
        return self._by_url.get((qid, image_url))

    def existing_for_sha(self, qid: str, sha: str) -> ImageRecord | None:
        return self._by_sha.get((qid, sha))

    def path_for(self, record: ImageRecord) -> Path:
        return self.root / record.source / record.filename

    def find(self, filename: str) -> ImageRecord | None:
        for record in self._by_url.values():
            if record.filename == filename:
                return record
        return None

    def read_bytes(self, record: ImageRecord) -> bytes:
        return self.path_for(record).read_bytes()

    def add(self, candidate: ImageCandidate, qid: str, source: str, data: bytes) -> ImageRecord:
        sha = sha256_hex(data)
        with self._lock:
            existing = self._by_sha.get((qid, sha))
            if existing is not None:
                return existing
            try:
                with Image.open(io.BytesIO(data)) as img:
                    width, height = img.size
                    mime = PIL_FORMAT_TO_MIME.get(img.format or "")
            except Exception as exc:
                raise PermanentError(f"{candidate.image_url}: undecodable image bytes") from exc
            if mime is None:
                raise PermanentError(f"{candidate.image_url}: unsupported image format")
            index = self._next_index.get(qid, 0)
            record = ImageRecord(
                qid=qid,
                index=index,
                filename=image_filename(qid, index, mime),
                source=source,
                page_url=candidate.page_url,
                image_url=candidate.image_url,
                author=candidate.author,
                date=candidate.date,
                width=width,
                height=height,
                mime=mime,
                sha256=sha,
            )
            path = self.path_for(record)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
            self._register(record)
            return record


def store_image(
    fetcher: PageFetcher,
    candidate: ImageCandidate,
    entity: "Entity",
    source: str,
    store: MediaStore,
) -> ImageRecord | None:
    """Download one candidate and store it for an entity.

    Returns None when the image is a duplicate of something already
    stored for this entity (same URL or same content hash); the store
    stays idempotent under re-runs.
    """
    if entity.qid is None:
        raise ValueError(f"entity {entity.id!r} has no canonical id; normalize first")
    existing = store.existing_for_url(entity.qid, candidate.image_url)
    if existing is not None:
        return None
    data = fetcher.fetch_bytes(candidate.image_url)
    if store.existing_for_sha(entity.qid, sha256_hex(data)) is not None:
        return None
    return store.add(candidate, entity.qid, source, data)


@dataclass
class CrawlReport:
    entities_total: int = 0
    entities_crawled: int = 0
    entities_skipped_not_found: int = 0
    images_retrieved: int = 0
    entities_with_images: int = 0

    def to_dict(self) -> dict:
        return {
            "entities_total": self.entities_total,
            "entities_crawled": self.entities_crawled,
            "entities_skipped_not_found": self.entities_skipped_not_found,
            "images_retrieved": self.images_retrieved,
            "entities_with_images": self.entities_with_images,
        }


def crawl_dataset(
    dataset: "Dataset",
    fetcher: PageFetcher,
    store: MediaStore,
    manifest_path: str | Path,
    journal_path: str | Path,
    policy: FilterPolicy | None = None,
    workers: int = 4,
    source: str = SOURCE_RETRIEVED,
) -> CrawlReport:
    """Crawl every entity in the dataset, appending to the manifest.

    Entities already present in the journal are skipped outright, so a
    finished crawl re-run performs no network requests. Manifest rows are
    appended in entity order regardless of worker scheduling, keeping
    clean-state crawls reproducible byte for byte.
    """
    policy = policy or FilterPolicy()
    journal = Journal(journal_path)
    report = CrawlReport(entities_total=len(dataset.entities))
    todo = [e for e in dataset.entities if e.qid and e.qid not in journal]

    def crawl_one(entity: "Entity"):
        page = fetcher.fetch_entity_page(entity.name)
        result = filter_images(extract_images(page), policy)
        records = []
        for cand in result.accepted:
            try:
                record = store_image(fetcher, cand, entity, source, store)
            except (NotFoundError, PermanentError) as exc:
                log.warning("skipping %s: %s", cand.image_url, exc)
                continue
            if record is not None:
                records.append(record)
        return records

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [(entity, pool.submit(crawl_one, entity)) for entity in todo]
        for entity, future in futures:
            try:
                records = future.result()
            except NotFoundError:
                report.entities_skipped_not_found += 1
                journal.mark(entity.qid)
                continue
            except (TransientError, PermanentError) as exc:
                log.warning("entity %s failed, will retry on resume: %s", entity.qid, exc)
                continue
            for record in records:
                append_jsonl(manifest_path, record.to_dict())
            report.entities_crawled += 1
            report.images_retrieved += len(records)
            journal.mark(entity.qid)

    covered = set()
    if Path(manifest_path).exists():
        from .util import read_jsonl

        covered = {
            row["qid"] for row in read_jsonl(manifest_path) if row.get("source") == source
        }
    report.entities_with_images = len(covered)
    return report
