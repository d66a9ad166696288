"""Run configuration: one JSON document drives every pipeline stage.

The fingerprint of the (defaults-merged) config is embedded in all
reports a run produces, so artifacts can be traced back to the exact
settings that made them.
"""

from __future__ import annotations

import json
from copy import deepcopy
from pathlib import Path
from typing import Any

from .util import fingerprint

DEFAULTS: dict[str, Any] = {
    "dataset_root": None,
    "output_dir": None,
    "media_root": None,  # defaults to <dataset_root>/media
    "page_url_template": "https://en.wikipedia.org/wiki/{title}",
    "caption_url": None,  # falls back to $BI_CAPTION_URL
    "llm_url": None,  # falls back to $BI_LLM_URL
    "mock": False,
    "crawl": {
        "min_width": 64,
        "min_height": 64,
        "max_images_per_entity": 25,
        "blocked_url_patterns": [],
        "delay_ms": 1000,
        "retries": 3,
        "user_agent": None,  # crawler default UA when None
        "workers": 4,
    },
    "caption": {"degenerate_threshold": 0.5},
    "fusion": {"retries": 1},
    "variants": ["g_o", "g_n", "g_on"],
    "image_features": None,
    "eval": {
        "modalities": ["s", "s+t+g"],
        "variant": "fusion",
        "filter": "filtered",
        "seed": 0,
        "dim": 64,
        "epochs": 200,
        "margin": 1.0,
        "learning_rate": 0.05,
        "negatives": 1,
        "text_dim": 256,
    },
}


def _merge(base: dict, override: dict) -> dict:
    merged = deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class RunConfig:
    def __init__(self, data: dict):
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        self.data = _merge(DEFAULTS, data)
        if not self.data["dataset_root"]:
            raise ValueError("config needs dataset_root")
        if not self.data["output_dir"]:
            raise ValueError("config needs output_dir")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls(json.loads(Path(path).read_text()))

    def __getitem__(self, key: str):
        return self.data[key]

    @property
    def dataset_root(self) -> Path:
        return Path(self.data["dataset_root"])

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    @property
    def media_root(self) -> Path:
        return Path(self.data["media_root"] or self.dataset_root / "media")

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True))
