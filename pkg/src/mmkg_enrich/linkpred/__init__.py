from .analysis import (
    RankDelta,
    rank_delta_report,
    run_ablation,
    subset_evaluate,
    train_for_config,
)
from .features import (
    DEFAULT_TEXT_DIM,
    compose_entity_texts,
    featurize_text,
    load_image_features,
    text_feature_table,
)
from .model import ModalityConfig, TranslationalLinkPredictor, parse_modality
from .ranking import (
    FilterIndex,
    MetricsReport,
    compute_metrics,
    evaluate,
    improvement,
    rank_from_scores,
    rank_query,
)

__all__ = [
    "DEFAULT_TEXT_DIM",
    "FilterIndex",
    "MetricsReport",
    "ModalityConfig",
    "RankDelta",
    "TranslationalLinkPredictor",
    "compose_entity_texts",
    "compute_metrics",
    "evaluate",
    "featurize_text",
    "improvement",
    "load_image_features",
    "parse_modality",
    "rank_delta_report",
    "rank_from_scores",
    "rank_query",
    "run_ablation",
    "subset_evaluate",
    "text_feature_table",
    "train_for_config",
]
