"""Command-line interface.

Every subcommand works from a dataset directory and an output (run)
directory; `run` chains the whole pipeline from a single JSON config.
The global --mock flag swaps remote providers for deterministic local
mocks so everything can run offline.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import audit as audit_mod
from . import pipeline
from .captioning import DEFAULT_PROMPT, caption_batch
from .config import RunConfig
from .crawler import MediaStore, crawl_dataset
from .errors import PipelineStageError
from .fusion import VARIANT_FUSION, VARIANTS, assemble_variants_batch, fuse_batch
from .kgdata import compute_stats, load_dataset
from .linkpred import (
    TranslationalLinkPredictor,
    evaluate,
    load_image_features,
    rank_delta_report,
    run_ablation,
    subset_evaluate,
    train_for_config,
)
from .util import write_jsonl


@click.group()
@click.option("--mock", is_flag=True, help="Use deterministic local providers; no network calls "
                                           "to caption or LLM services.")
@click.pass_context
def main(ctx, mock):
    ctx.ensure_object(dict)
    ctx.obj["mock"] = mock


def _config_from_options(dataset, out, **overrides) -> RunConfig:
    data = {"dataset_root": str(dataset), "output_dir": str(out)}
    data.update(overrides)
    return RunConfig(data)


def _echo_json(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
def stats(dataset):
    """Print dataset statistics as JSON."""
    _echo_json(compute_stats(load_dataset(dataset)).to_dict())


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--url-template", default=None, help="Page URL template with a {title} slot.")
@click.option("--max-images", default=25, show_default=True)
@click.option("--min-dim", default=64, show_default=True,
              help="Minimum width and height in pixels.")
@click.option("--delay-ms", default=1000, show_default=True)
@click.option("--user-agent", default=None)
@click.option("--workers", default=4, show_default=True)
@click.option("--resume/--no-resume", default=True, show_default=True,
              help="Skip entities already journaled from a previous crawl.")
def crawl(dataset, out, url_template, max_images, min_dim, delay_ms, user_agent, workers,
          resume):
    """Fetch entity pages and store acceptable images."""
    overrides = {"crawl": {"max_images_per_entity": max_images, "min_width": min_dim,
                           "min_height": min_dim, "delay_ms": delay_ms,
                           "workers": workers}}
    if url_template:
        overrides["page_url_template"] = url_template
    if user_agent:
        overrides["crawl"]["user_agent"] = user_agent
    config = _config_from_options(dataset, out, **overrides)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(dataset)
    manifest = out / "images.jsonl"
    pipeline.seed_manifest(config, ds, manifest)
    journal = out / "crawl.journal"
    if not resume and journal.exists():
        journal.unlink()
    store = MediaStore(config.media_root, pipeline.load_manifest(manifest))
    report = crawl_dataset(ds, pipeline.build_fetcher(config), store, manifest, journal,
                           policy=pipeline.build_policy(config), workers=workers)
    _echo_json(report.to_dict())


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--provider-url", default=None,
              help="Caption endpoint; defaults to $BI_CAPTION_URL.")
@click.option("--threshold", default=0.5, show_default=True,
              help="Degenerate-caption token frequency threshold.")
@click.pass_context
def caption(ctx, dataset, out, provider_url, threshold):
    """Caption every stored image listed in the run manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config = _config_from_options(dataset, out, caption_url=provider_url,
                                  caption={"degenerate_threshold": threshold})
    records = pipeline.load_manifest(out / "images.jsonl")
    if not records:
        raise click.ClickException(f"no manifest at {out / 'images.jsonl'}; crawl first")
    provider = pipeline.caption_provider_for(config, ctx.obj["mock"])
    store = MediaStore(config.media_root, records)
    report = caption_batch(records, store, provider, out / "captions.jsonl",
                           out / "caption.journal", prompt=DEFAULT_PROMPT,
                           degenerate_threshold=threshold)
    _echo_json(report.to_dict())


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--variant", default=VARIANT_FUSION, show_default=True,
              type=click.Choice(list(VARIANTS)))
@click.option("--llm-url", default=None, help="Summarize endpoint; defaults to $BI_LLM_URL.")
@click.option("--retry", default=1, show_default=True,
              help="Validation retries before falling back to concatenation.")
@click.pass_context
def fuse(ctx, dataset, out, variant, llm_url, retry):
    """Produce entity text for one variant (LLM fusion or caption joins)."""
    out = Path(out)
    ds = pipeline.dataset_with_manifest(dataset, out)
    captions = pipeline.load_captions(out / "captions.jsonl")
    if not captions:
        raise click.ClickException(f"no captions at {out / 'captions.jsonl'}; caption first")
    if variant == VARIANT_FUSION:
        config = _config_from_options(dataset, out, llm_url=llm_url)
        llm = pipeline.llm_provider_for(config, ctx.obj["mock"])
        report = fuse_batch(ds, captions, llm, out / "summaries.jsonl",
                            out / "fusion.journal", retries=retry)
    else:
        report = assemble_variants_batch(ds, captions, [variant], out / "summaries.jsonl",
                                         out / "variants.journal")
    _echo_json(report.to_dict())


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def variants(dataset, out):
    """Assemble the three caption-join variants (g_o, g_n, g_on)."""
    out = Path(out)
    ds = pipeline.dataset_with_manifest(dataset, out)
    captions = pipeline.load_captions(out / "captions.jsonl")
    if not captions:
        raise click.ClickException(f"no captions at {out / 'captions.jsonl'}; caption first")
    report = assemble_variants_batch(ds, captions, ["g_o", "g_n", "g_on"],
                                     out / "summaries.jsonl", out / "variants.journal")
    _echo_json(report.to_dict())


def _hyperparams(seed, dim, epochs, margin, lr, negatives, text_dim):
    return {"seed": seed, "dim": dim, "epochs": epochs, "margin": margin,
            "learning_rate": lr, "negatives": negatives, "text_dim": text_dim}


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--model-dir", default=None, type=click.Path(file_okay=False),
              help="Where to save the model [default: OUT/models/MODALITY].")
@click.option("--modality", default="s", show_default=True)
@click.option("--variant", default="original_description", show_default=True)
@click.option("--image-features", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--dim", default=64, show_default=True)
@click.option("--epochs", default=200, show_default=True)
@click.option("--margin", default=1.0, show_default=True)
@click.option("--lr", default=0.05, show_default=True)
@click.option("--negatives", default=1, show_default=True)
@click.option("--text-dim", default=256, show_default=True)
def train(dataset, out, model_dir, modality, variant, image_features, seed, dim, epochs,
          margin, lr, negatives, text_dim):
    """Train the link predictor for one modality setting."""
    out = Path(out)
    ds = pipeline.dataset_with_manifest(dataset, out)
    summaries = pipeline.load_summaries(out / "summaries.jsonl")
    feats = load_image_features(image_features) if image_features else None
    model = train_for_config(ds, modality, variant, summaries=summaries,
                             image_features=feats,
                             **_hyperparams(seed, dim, epochs, margin, lr, negatives,
                                            text_dim))
    target = Path(model_dir) if model_dir else out / "models" / modality.replace("+", "_")
    model.save(target)
    click.echo(json.dumps({"model_dir": str(target),
                           "final_epoch_loss": model.loss_history_[-1]}))


@main.command("eval")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--model-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--variant", default="original_description", show_default=True,
              help="Variant label recorded in the report.")
@click.option("--filter", "filter_mode", default="filtered", show_default=True,
              type=click.Choice(["filtered", "raw"]))
def eval_cmd(dataset, out, model_dir, variant, filter_mode):
    """Evaluate a trained model on the test split and write metrics.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = pipeline.dataset_with_manifest(dataset, out)
    model = TranslationalLinkPredictor.load(model_dir)
    report = evaluate(model, ds.test, ds.all_triples(),
                      filtered=filter_mode == "filtered", variant=variant)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    _echo_json(report.to_dict())


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON file: list of {modality, variant} configs plus optional "
                   "hyperparams under 'params'.")
@click.option("--image-features", default=None, type=click.Path(exists=True, dir_okay=False))
def ablate(dataset, out, config_path, image_features):
    """Train and evaluate a grid of modality/variant configs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = pipeline.dataset_with_manifest(dataset, out)
    spec = json.loads(Path(config_path).read_text())
    configs = spec["configs"] if isinstance(spec, dict) else spec
    params = spec.get("params", {}) if isinstance(spec, dict) else {}
    summaries = pipeline.load_summaries(out / "summaries.jsonl")
    feats = load_image_features(image_features) if image_features else None
    rows = run_ablation(ds, configs, summaries=summaries, image_features=feats, **params)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    _echo_json({"configs": len(rows),
                "skipped": sum(1 for r in rows if "skipped" in r)})


@main.command("subset-eval")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--entities", "entities_file", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="File with one qid per line.")
@click.option("--baseline", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--enriched", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--filter", "filter_mode", default="filtered", show_default=True,
              type=click.Choice(["filtered", "raw"]))
def subset_eval(dataset, out, entities_file, baseline, enriched, filter_mode):
    """Compare two trained models on test triples touching listed entities."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = pipeline.dataset_with_manifest(dataset, out)
    subset = {line.strip() for line in Path(entities_file).read_text().splitlines()
              if line.strip()}
    model_a = TranslationalLinkPredictor.load(baseline)
    model_b = TranslationalLinkPredictor.load(enriched)
    result = subset_evaluate(model_a, model_b, subset, ds,
                             filtered=filter_mode == "filtered")
    (out / "subset_eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    _echo_json(result["improvement_pct"])


@main.command("rank-delta")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--baseline", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--enriched", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--filter", "filter_mode", default="filtered", show_default=True,
              type=click.Choice(["filtered", "raw"]))
@click.option("--top", default=20, show_default=True, help="Rows to echo to the terminal.")
def rank_delta(dataset, out, baseline, enriched, filter_mode, top):
    """Per-query rank movement between two models, best improvements first."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = pipeline.dataset_with_manifest(dataset, out)
    model_a = TranslationalLinkPredictor.load(baseline)
    model_b = TranslationalLinkPredictor.load(enriched)
    deltas = rank_delta_report(model_a, model_b, ds, filtered=filter_mode == "filtered")
    write_jsonl(out / "rank_delta.jsonl", (d.to_dict() for d in deltas))
    for row in deltas[:top]:
        click.echo(json.dumps(row.to_dict()))


@main.group()
def audit():
    """Human audit: sample cases and serve the annotation API."""


@audit.command("sample")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
def audit_sample(dataset, out, n, seed):
    """Draw a deterministic batch of auditable cases."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = pipeline.dataset_with_manifest(dataset, out)
    summaries = pipeline.load_summaries(out / "summaries.jsonl")
    batch = audit_mod.sample_cases(ds, summaries, n, seed)
    batch.save(out / "audit_batch.json")
    click.echo(json.dumps({"cases": len(batch.cases), "seed": seed,
                           "path": str(out / "audit_batch.json")}))


@audit.command("serve")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--batch", "batch_path", default=None, type=click.Path(exists=True,
                                                                     dir_okay=False))
@click.option("--port", default=8090, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--ui-dir", default=None, type=click.Path(file_okay=False),
              help="Directory with a built annotation UI to serve at /.")
def audit_serve(dataset, out, batch_path, port, host, ui_dir):
    """Serve the audit REST API (and UI, when built) for a batch."""
    import uvicorn

    out = Path(out)
    ds = pipeline.dataset_with_manifest(dataset, out)
    batch = audit_mod.AuditBatch.load(batch_path or out / "audit_batch.json")
    config = _config_from_options(dataset, out)
    store = MediaStore(config.media_root, ds.images)
    app = audit_mod.create_app(batch, store, ds.images, out / "verdicts.jsonl",
                               ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port)


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def run(ctx, config_path):
    """Run the whole pipeline from a JSON config document."""
    config = RunConfig.load(config_path)
    try:
        reports = pipeline.run_pipeline(config, mock=ctx.obj["mock"])
    except PipelineStageError as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    _echo_json(reports)


if __name__ == "__main__":
    main()
