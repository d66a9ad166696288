"""Comparative analyses on top of the bench: ablations over modality
settings, subset evaluation, and per-query rank deltas between two
trained models."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from ..errors import EmptyInputError, MissingModalityError
from .features import DEFAULT_TEXT_DIM, compose_entity_texts, text_feature_table
from .model import TranslationalLinkPredictor, parse_modality
from .ranking import HEAD, TAIL, FilterIndex, evaluate, improvement, rank_query

log = logging.getLogger(__name__)


def train_for_config(dataset, modality: str, variant: str, summaries=None,
                     image_features=None, **params) -> TranslationalLinkPredictor:
    """Build features for a (modality, variant) pair and fit a model."""
    config = parse_modality(modality)
    text_features = None
    if config.text:
        generated = variant if config.use_generated else None
        texts = compose_entity_texts(dataset, config.use_description, generated, summaries)
        text_features = text_feature_table(texts, params.get("text_dim", DEFAULT_TEXT_DIM))
    if config.image and not image_features:
        raise MissingModalityError(f"modality {modality!r} needs image features")
    model = TranslationalLinkPredictor(modality=modality, **params)
    return model.fit(dataset, text_features=text_features, image_features=image_features)


def run_ablation(dataset, configs: list[dict], summaries=None, image_features=None,
                 filtered: bool = True, **params) -> list[dict]:
    """Train and evaluate one model per config on identical splits.

    Each config is {"modality": ..., "variant": ...}. Configs whose
    required inputs are absent are reported as skipped rather than
    aborting the sweep.
    """
    rows = []
    known = dataset.all_triples()
    for config in configs:
        modality = config["modality"]
        variant = config.get("variant", "original_description")
        try:
            model = train_for_config(dataset, modality, variant, summaries=summaries,
                                     image_features=image_features, **params)
            report = evaluate(model, dataset.test, known, filtered=filtered,
                              variant=variant)
        except (MissingModalityError, EmptyInputError) as exc:
            log.warning("skipping config %s: %s", config, exc)
            rows.append({"modality": modality, "variant": variant,
                         "skipped": str(exc)})
            continue
        rows.append({"modality": modality, "variant": variant,
                     "report": report.to_dict()})
    return rows


def subset_evaluate(model_a, model_b, subset_qids: set[str], dataset,
                    filtered: bool = True, variant_a: str = "original_description",
                    variant_b: str = "original_description") -> dict:
    """Evaluate two models on test triples that touch a subset of entities.

    Returns both reports plus the relative improvement of b over a for
    MRR and each Hits cutoff.
    """
    qid_of = {e.id: e.qid for e in dataset.entities}
    triples = [t for t in dataset.test
               if qid_of.get(t.head) in subset_qids or qid_of.get(t.tail) in subset_qids]
    if not triples:
        raise EmptyInputError("no test triples touch the requested subset")
    if model_a.entity_ids_ != model_b.entity_ids_:
        raise ValueError("models were trained over different entity vocabularies")
    known = dataset.all_triples()
    report_a = evaluate(model_a, triples, known, filtered=filtered, variant=variant_a)
    report_b = evaluate(model_b, triples, known, filtered=filtered, variant=variant_b)
    improv = {"mrr": improvement(report_b.mrr, report_a.mrr) if report_a.mrr > 0 else None}
    for k, value in report_a.hits.items():
        improv[f"hits@{k}"] = improvement(report_b.hits[k], value) if value > 0 else None
    return {
        "triple_count": len(triples),
        "baseline": report_a.to_dict(),
        "enriched": report_b.to_dict(),
        "improvement_pct": improv,
    }


@dataclass(frozen=True)
class RankDelta:
    direction: str
    head: str
    relation: str
    tail: str
    baseline_rank: int
    enriched_rank: int

    @property
    def delta(self) -> int:
        return self.baseline_rank - self.enriched_rank

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "head": self.head,
            "relation": self.relation,
            "tail": self.tail,
            "baseline_rank": self.baseline_rank,
            "enriched_rank": self.enriched_rank,
            "delta": self.delta,
        }


def rank_delta_report(model_baseline, model_enriched, dataset,
                      filtered: bool = True) -> list[RankDelta]:
    """Per-query rank movement between two models over the same test set,
    sorted by improvement (largest rank drop first, input order on ties)."""
    if model_baseline.entity_ids_ != model_enriched.entity_ids_:
        raise ValueError("models were trained over different entity vocabularies")
    if not dataset.test:
        raise EmptyInputError("test split is empty")
    filter_index = FilterIndex(dataset.all_triples()) if filtered else None
    deltas = []
    for triple in dataset.test:
        for direction in (TAIL, HEAD):
            rank_a = rank_query(model_baseline, direction, triple.head, triple.relation,
                                triple.tail, filter_index)
            rank_b = rank_query(model_enriched, direction, triple.head, triple.relation,
                                triple.tail, filter_index)
            deltas.append(RankDelta(direction, triple.head, triple.relation, triple.tail,
                                    rank_a, rank_b))
    return sorted(deltas, key=lambda d: -d.delta)
