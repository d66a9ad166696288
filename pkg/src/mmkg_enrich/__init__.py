"""Multi-modal knowledge graph enrichment toolkit.

Crawl images for entities, caption them, fuse captions into entity
text, measure the effect on link prediction, and audit the results.
"""

__version__ = "0.1.0"

from .kgdata import (  # noqa: F401
    Dataset,
    DatasetStats,
    Entity,
    Triple,
    compute_stats,
    load_dataset,
    normalize_ids,
    write_dataset,
)
