"""Caption and summarization providers.

Both providers speak a small JSON-over-HTTP protocol:

* ``POST {endpoint}/caption``  body ``{"image_b64": ..., "prompt": ...}`` -> ``{"text": ...}``
* ``POST {endpoint}/summarize`` body ``{"prompt": ...}`` -> ``{"text": ...}``

Endpoints come from configuration or the ``BI_CAPTION_URL`` /
``BI_LLM_URL`` environment variables. Mock providers are deterministic
stand-ins used by ``--mock`` runs and the offline test suite.
"""

from __future__ import annotations

import base64
import hashlib
import os
import time

import requests

from .errors import PermanentError, TransientError

CAPTION_URL_ENV = "BI_CAPTION_URL"
LLM_URL_ENV = "BI_LLM_URL"


def caption_url_from_env() -> str | None:
    return os.environ.get(CAPTION_URL_ENV)


def llm_url_from_env() -> str | None:
    return os.environ.get(LLM_URL_ENV)


def _post_json(url: str, payload: dict, retries: int = 2, backoff_s: float = 0.2,
               timeout_s: float = 60.0) -> dict:
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(url, json=payload, timeout=timeout_s)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last = exc
            resp = None
        if resp is not None:
            if resp.status_code < 400:
                body = resp.json()
                if "text" not in body:
                    raise PermanentError(f"{url}: response missing 'text' field")
                return body
            if resp.status_code < 500:
                raise PermanentError(f"{url}: provider returned {resp.status_code}")
            last = TransientError(f"{url}: provider returned {resp.status_code}")
        if attempt < retries:
            time.sleep(backoff_s * (2**attempt))
    raise TransientError(f"{url}: giving up after {retries + 1} attempts") from (
        last if isinstance(last, Exception) else None
    )


class HttpCaptionProvider:
    def __init__(self, endpoint: str, retries: int = 2, timeout_s: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.timeout_s = timeout_s
        self.name = f"http:{self.endpoint}"

    def caption(self, image_bytes: bytes, prompt: str) -> str:
        payload = {
            "image_b64": base64.b64encode(image_bytes).decode("ascii"),
            "prompt": prompt,
        }
        body = _post_json(f"{self.endpoint}/caption", payload, retries=self.retries,
                          timeout_s=self.timeout_s)
        return body["text"]


class HttpLLMProvider:
    def __init__(self, endpoint: str, retries: int = 2, timeout_s: float = 120.0):
        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.timeout_s = timeout_s
        self.name = f"http:{self.endpoint}"

    def summarize(self, prompt: str) -> str:
        body = _post_json(f"{self.endpoint}/summarize", {"prompt": prompt},
                          retries=self.retries, timeout_s=self.timeout_s)
        return body["text"]


class MockCaptionProvider:
    """Deterministic captions keyed by image content hash."""

    name = "mock"

    def caption(self, image_bytes: bytes, prompt: str) -> str:
        digest = hashlib.sha256(image_bytes).hexdigest()[:8]
        return f"MOCK CAPTION {digest}: scene description"


class MockLLMProvider:
    """Summarizes by keeping the first 60 words of the prompt as one paragraph."""

    name = "mock"
    word_limit = 60

    def summarize(self, prompt: str) -> str:
        return " ".join(prompt.split()[: self.word_limit])
