"""Ranking, evaluation metrics, and improvement arithmetic.

Both query directions are evaluated for every test triple. Ties in the
score vector are resolved with the mean rank of the tied block (floored),
so a model that scores everything equally cannot luck into rank 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from ..errors import EmptyInputError
from ..util import fingerprint

HEAD = "head"
TAIL = "tail"

DEFAULT_KS = (1, 3, 10)


class FilterIndex:
    """Known-true triples indexed for filtered ranking."""

    def __init__(self, triples):
        self.tails_by_hr: dict[tuple[str, str], set[str]] = {}
        self.heads_by_rt: dict[tuple[str, str], set[str]] = {}
        for t in triples:
            self.tails_by_hr.setdefault((t.head, t.relation), set()).add(t.tail)
            self.heads_by_rt.setdefault((t.relation, t.tail), set()).add(t.head)


def rank_from_scores(scores: np.ndarray, true_position: int,
                     allowed: np.ndarray | None = None) -> int:
    """Rank of the true candidate within the allowed score vector.

    Ties share the mean rank of their block, floored:
    rank = 1 + #(strictly better) + floor(#ties / 2).
    The true candidate always competes, whatever the mask says.
    """
    true_score = scores[true_position]
    if allowed is None:
        considered = scores
        better = int(np.sum(considered > true_score))
        ties = int(np.sum(considered == true_score)) - 1
    else:
        mask = allowed.copy()
        mask[true_position] = True
        considered = scores[mask]
        better = int(np.sum(considered > true_score))
        ties = int(np.sum(considered == true_score)) - 1
    return 1 + better + ties // 2


def rank_query(model, direction: str, head: str, relation: str, tail: str,
               filter_index: FilterIndex | None = None) -> int:
    """Rank the true answer of one query; filtered when an index is given."""
    if direction == TAIL:
        scores = model.score_all_tails(head, relation)
        true_position = model.entity_position(tail)
        known = filter_index.tails_by_hr.get((head, relation), set()) if filter_index else set()
        exclude = known - {tail}
    elif direction == HEAD:
        scores = model.score_all_heads(relation, tail)
        true_position = model.entity_position(head)
        known = filter_index.heads_by_rt.get((relation, tail), set()) if filter_index else set()
        exclude = known - {head}
    else:
        raise ValueError(f"direction must be 'head' or 'tail', got {direction!r}")
    allowed = None
    if exclude:
        allowed = np.ones(scores.shape[0], dtype=bool)
        for entity_id in exclude:
            allowed[model.entity_position(entity_id)] = False
    return rank_from_scores(scores, true_position, allowed)


def compute_metrics(ranks: list[int], ks=DEFAULT_KS) -> tuple[float, dict[int, float]]:
    if not ranks:
        raise EmptyInputError("no ranks to aggregate")
    arr = np.asarray(ranks, dtype=np.float64)
    mrr = float(np.mean(1.0 / arr))
    hits = {k: float(np.mean(arr <= k)) for k in ks}
    return mrr, hits


@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    by_direction: dict[str, dict]
    query_count: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
            "by_direction": self.by_direction,
            "query_count": self.query_count,
            "config": self.config,
            "fingerprint": fingerprint(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(model, test_triples, known_triples=None, filtered: bool = True,
             ks=DEFAULT_KS, variant: str = "original_description") -> MetricsReport:
    """Rank both directions of every test triple and aggregate.

    ``known_triples`` (usually train+valid+test) feeds the filter; in raw
    mode it is ignored. The report embeds the run configuration so two
    reports are comparable at a glance.
    """
    if not test_triples:
        raise EmptyInputError("test split is empty")
    filter_index = FilterIndex(known_triples) if (filtered and known_triples) else None
    ranks: dict[str, list[int]] = {HEAD: [], TAIL: []}
    for triple in test_triples:
        for direction in (TAIL, HEAD):
            ranks[direction].append(
                rank_query(model, direction, triple.head, triple.relation, triple.tail,
                           filter_index)
            )
    all_ranks = ranks[HEAD] + ranks[TAIL]
    mrr, hits = compute_metrics(all_ranks, ks)
    by_direction = {}
    for direction in (HEAD, TAIL):
        d_mrr, d_hits = compute_metrics(ranks[direction], ks)
        by_direction[direction] = {
            "mrr": d_mrr,
            "hits": {str(k): v for k, v in sorted(d_hits.items())},
        }
    config = {
        "modality": model.modality,
        "variant": variant,
        "filter": "filtered" if filter_index is not None else "raw",
        "seed": model.seed,
        "d": model.dim,
        "epochs": model.epochs,
    }
    return MetricsReport(
        mrr=mrr,
        hits=hits,
        by_direction=by_direction,
        query_count=len(all_ranks),
        config=config,
    )


def improvement(enriched: float, baseline: float) -> float:
    """Relative improvement in percent, rounded half-up to 2 decimals.

    Undefined for non-positive baselines; refusing beats returning an
    arbitrary sign.
    """
    if baseline <= 0:
        raise ValueError(f"improvement undefined for baseline {baseline}")
    value = (Decimal(str(enriched)) - Decimal(str(baseline))) / Decimal(str(baseline)) * 100
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))
