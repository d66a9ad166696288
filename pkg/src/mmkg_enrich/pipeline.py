"""End-to-end run orchestration: crawl, caption, fuse, variants, train, eval.

Each stage writes its artifacts and a report (stamped with the config
fingerprint) into the run's output directory. Stages are individually
resumable through their journals; a stage failure stops the run before
any dependent stage executes.
"""

from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path

from .captioning import Caption, caption_batch
from .config import RunConfig
from .crawler import (
    USER_AGENT,
    FilterPolicy,
    MediaStore,
    PageFetcher,
    Politeness,
    crawl_dataset,
)
from .errors import PipelineStageError
from .fusion import FusedSummary, assemble_variants_batch, fuse_batch
from .kgdata import Dataset, load_dataset
from .linkpred import evaluate, load_image_features, train_for_config
from .providers import (
    HttpCaptionProvider,
    HttpLLMProvider,
    MockCaptionProvider,
    MockLLMProvider,
    caption_url_from_env,
    llm_url_from_env,
)
from .util import read_jsonl, write_jsonl

log = logging.getLogger(__name__)


def _write_report(path: Path, payload: dict, config_fingerprint: str) -> None:
    payload = {**payload, "config_fingerprint": config_fingerprint}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def caption_provider_for(config: RunConfig, mock: bool):
    if mock or config["mock"]:
        return MockCaptionProvider()
    url = config["caption_url"] or caption_url_from_env()
    if not url:
        raise ValueError("no caption provider: set caption_url or BI_CAPTION_URL, or use --mock")
    return HttpCaptionProvider(url)


def llm_provider_for(config: RunConfig, mock: bool):
    if mock or config["mock"]:
        return MockLLMProvider()
    url = config["llm_url"] or llm_url_from_env()
    if not url:
        raise ValueError("no LLM provider: set llm_url or BI_LLM_URL, or use --mock")
    return HttpLLMProvider(url)


def build_fetcher(config: RunConfig) -> PageFetcher:
    crawl = config["crawl"]
    politeness = Politeness(
        delay_ms=crawl["delay_ms"],
        retries=crawl["retries"],
        user_agent=crawl["user_agent"] or USER_AGENT,
    )
    return PageFetcher(url_template=config["page_url_template"], politeness=politeness)


def build_policy(config: RunConfig) -> FilterPolicy:
    crawl = config["crawl"]
    return FilterPolicy(
        min_width=crawl["min_width"],
        min_height=crawl["min_height"],
        max_images_per_entity=crawl["max_images_per_entity"],
        blocked_url_patterns=tuple(crawl["blocked_url_patterns"]),
    )


def load_manifest(path: Path):
    from .crawler import ImageRecord

    if not path.exists():
        return []
    return [ImageRecord.from_dict(row) for row in read_jsonl(path)]


def seed_manifest(config: RunConfig, dataset: Dataset, manifest_path: Path) -> None:
    """Start a run manifest from the dataset's own image records.

    When the run's media root differs from the dataset's, the seeded
    images' bytes are copied over so every manifest row stays readable
    from one root.
    """
    if manifest_path.exists() or not dataset.images:
        return
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    dataset_media = Path(dataset.root) / "media"
    for record in dataset.images:
        src = dataset_media / record.source / record.filename
        dst = config.media_root / record.source / record.filename
        if src != dst and src.exists() and not dst.exists():
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
    write_jsonl(manifest_path, (r.to_dict() for r in dataset.images))


def dataset_with_manifest(dataset_root: str | Path, out: str | Path) -> Dataset:
    """Load a dataset, swapping in the run's combined image manifest when
    one exists (original rows plus whatever the crawl added)."""
    dataset = load_dataset(dataset_root)
    records = load_manifest(Path(out) / "images.jsonl")
    if not records:
        return dataset
    return Dataset(
        root=dataset.root,
        entities=dataset.entities,
        train=dataset.train,
        valid=dataset.valid,
        test=dataset.test,
        images=records,
    )


def load_captions(path: Path) -> list[Caption]:
    if not path.exists():
        return []
    return [Caption.from_dict(row) for row in read_jsonl(path)]


def load_summaries(path: Path) -> list[FusedSummary]:
    if not path.exists():
        return []
    return [FusedSummary.from_dict(row) for row in read_jsonl(path)]


def run_pipeline(config: RunConfig, mock: bool = False) -> dict:
    """Run all stages in order and return the collected stage reports."""
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    fp = config.fingerprint
    reports: dict[str, dict] = {}

    dataset = load_dataset(config.dataset_root)
    unqualified = [e.id for e in dataset.entities if not e.qid]
    if unqualified:
        raise PipelineStageError(
            "crawl",
            ValueError(f"{len(unqualified)} entities lack canonical ids; "
                       f"normalize the dataset first (e.g. {unqualified[:3]})"),
        )

    manifest_path = out / "images.jsonl"
    captions_path = out / "captions.jsonl"
    summaries_path = out / "summaries.jsonl"

    # crawl
    try:
        seed_manifest(config, dataset, manifest_path)
        store = MediaStore(config.media_root, load_manifest(manifest_path))
        report = crawl_dataset(
            dataset,
            build_fetcher(config),
            store,
            manifest_path,
            out / "crawl.journal",
            policy=build_policy(config),
            workers=config["crawl"]["workers"],
        )
        reports["crawl"] = report.to_dict()
        _write_report(out / "crawl_report.json", report.to_dict(), fp)
    except Exception as exc:
        raise PipelineStageError("crawl", exc) from exc

    records = load_manifest(manifest_path)
    enriched = Dataset(
        root=dataset.root,
        entities=dataset.entities,
        train=dataset.train,
        valid=dataset.valid,
        test=dataset.test,
        images=records,
    )

    # caption
    try:
        provider = caption_provider_for(config, mock)
        store = MediaStore(config.media_root, records)
        report = caption_batch(
            records, store, provider, captions_path, out / "caption.journal",
            degenerate_threshold=config["caption"]["degenerate_threshold"],
        )
        reports["caption"] = report.to_dict()
        _write_report(out / "caption_report.json", report.to_dict(), fp)
    except Exception as exc:
        raise PipelineStageError("caption", exc) from exc

    captions = load_captions(captions_path)

    # fuse
    try:
        llm = llm_provider_for(config, mock)
        report = fuse_batch(enriched, captions, llm, summaries_path, out / "fusion.journal",
                            retries=config["fusion"]["retries"])
        reports["fuse"] = report.to_dict()
        _write_report(out / "fusion_report.json", report.to_dict(), fp)
    except Exception as exc:
        raise PipelineStageError("fuse", exc) from exc

    # variants
    try:
        report = assemble_variants_batch(enriched, captions, list(config["variants"]),
                                         summaries_path, out / "variants.journal")
        reports["variants"] = report.to_dict()
        _write_report(out / "variants_report.json", report.to_dict(), fp)
    except Exception as exc:
        raise PipelineStageError("variants", exc) from exc

    summaries = load_summaries(summaries_path)

    # train + eval, one run per modality setting
    try:
        eval_cfg = config["eval"]
        image_features = None
        if config["image_features"]:
            image_features = load_image_features(config["image_features"])
        runs = []
        for modality in eval_cfg["modalities"]:
            model = train_for_config(
                enriched, modality, eval_cfg["variant"],
                summaries=summaries, image_features=image_features,
                dim=eval_cfg["dim"], margin=eval_cfg["margin"],
                negatives=eval_cfg["negatives"], epochs=eval_cfg["epochs"],
                learning_rate=eval_cfg["learning_rate"], seed=eval_cfg["seed"],
                text_dim=eval_cfg["text_dim"],
            )
            model_dir = out / "models" / modality.replace("+", "_")
            model.save(model_dir)
            report = evaluate(
                model, enriched.test, enriched.all_triples(),
                filtered=eval_cfg["filter"] == "filtered",
                variant=eval_cfg["variant"],
            )
            runs.append(report.to_dict())
        reports["eval"] = {"runs": runs}
        _write_report(out / "metrics.json", {"runs": runs}, fp)
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError("train/eval", exc) from exc

    return reports
