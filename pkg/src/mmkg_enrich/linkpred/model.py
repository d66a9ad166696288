"""Gated translational embedding model.

Entities are embedded as a gated sum of up to three channels: a learned
structural vector, a projected text vector, and a projected image
vector. Scoring is translational: s(h, r, t) = -|E(h) + R(r) - E(t)|.
Gates are renormalized per entity over the channels that are both
enabled by the modality setting and actually available for that entity;
an entity with no available channel embeds to the zero vector.

The estimator follows the fit/predict conventions of scikit-learn so it
can be cloned and its hyperparameters introspected with get_params.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ..errors import EmptyInputError
from .features import DEFAULT_TEXT_DIM

CHANNEL_STRUCT = "s"
CHANNEL_IMAGE = "i"
CHANNEL_TEXT = "t"
CHANNEL_GENERATED = "g"

_TOKEN_ALIASES = {
    "s": "s", "struct": "s", "structure": "s",
    "i": "i", "image": "i", "img": "i",
    "t": "t", "text": "t",
    "g": "g", "gen": "g", "generated": "g",
}


@dataclass(frozen=True)
class ModalityConfig:
    """Which channels a modality token enables.

    ``t`` routes the original description into the text channel and
    ``g`` routes the generated variant text; both together concatenate.
    """

    struct: bool
    image: bool
    use_description: bool
    use_generated: bool

    @property
    def text(self) -> bool:
        return self.use_description or self.use_generated

    @property
    def canonical(self) -> str:
        parts = []
        if self.struct:
            parts.append("s")
        if self.image:
            parts.append("i")
        if self.use_description:
            parts.append("t")
        if self.use_generated:
            parts.append("g")
        return "+".join(parts)


def parse_modality(setting: str) -> ModalityConfig:
    """Parse a modality token like ``t+g``, ``image+text``, or ``s``."""
    flags = {"s": False, "i": False, "t": False, "g": False}
    for raw in setting.split("+"):
        token = raw.strip().lower()
        if token not in _TOKEN_ALIASES:
            raise ValueError(f"unknown modality token {raw!r} in {setting!r}")
        flags[_TOKEN_ALIASES[token]] = True
    if not any(flags.values()):
        raise ValueError(f"modality setting {setting!r} enables no channels")
    return ModalityConfig(
        struct=flags["s"],
        image=flags["i"],
        use_description=flags["t"],
        use_generated=flags["g"],
    )


_EPS = 1e-12


class TranslationalLinkPredictor(BaseEstimator):
    """Margin-based translational link predictor with gated modalities.

    Parameters
    ----------
    dim : width of the shared embedding space.
    margin : margin of the ranking loss.
    negatives : negative samples drawn per positive triple.
    epochs : full passes over the training triples.
    learning_rate : SGD step size.
    seed : seed for init, shuffling, and negative sampling; fixing it
        makes training fully deterministic.
    modality : modality token, see parse_modality.
    text_dim / image_dim : input feature widths (image_dim is inferred
        from the supplied features when left at None).
    gates : optional base weight per channel, ``(struct, text, image)``;
        uniform when None. Renormalized per entity over what is available.
    """

    def __init__(self, dim: int = 64, margin: float = 1.0, negatives: int = 1,
                 epochs: int = 200, learning_rate: float = 0.05, seed: int = 0,
                 modality: str = "s", text_dim: int = DEFAULT_TEXT_DIM,
                 image_dim: int | None = None,
                 gates: tuple[float, float, float] | None = None):
        self.dim = dim
        self.margin = margin
        self.negatives = negatives
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.modality = modality
        self.text_dim = text_dim
        self.image_dim = image_dim
        self.gates = gates

    # -- fitting -----------------------------------------------------

    def fit(self, dataset, text_features: dict[str, np.ndarray] | None = None,
            image_features: dict[str, np.ndarray] | None = None):
        """Train on dataset.train. Feature tables are keyed by qid;
        entities missing from a table get the zero vector for that
        channel and their gate mass moves to the remaining channels."""
        config = parse_modality(self.modality)
        if not dataset.train:
            raise EmptyInputError("training split is empty")

        self.entity_ids_ = [e.id for e in dataset.entities]
        self.relation_ids_ = list(dataset.relations)
        ent_index = {eid: i for i, eid in enumerate(self.entity_ids_)}
        rel_index = {rid: i for i, rid in enumerate(self.relation_ids_)}
        n, m, d = len(self.entity_ids_), len(self.relation_ids_), self.dim

        rng = np.random.default_rng(self.seed)
        struct = rng.normal(scale=1.0 / np.sqrt(d), size=(n, d))
        relations = rng.normal(scale=1.0 / np.sqrt(d), size=(m, d))

        tx = np.zeros((n, self.text_dim))
        if config.text and text_features:
            for entity in dataset.entities:
                if entity.qid and entity.qid in text_features:
                    tx[ent_index[entity.id]] = text_features[entity.qid]
        img_dim = self.image_dim
        if img_dim is None:
            img_dim = next(iter(image_features.values())).shape[0] if image_features else 1
        im = np.zeros((n, img_dim))
        if config.image and image_features:
            for entity in dataset.entities:
                if entity.qid and entity.qid in image_features:
                    im[ent_index[entity.id]] = image_features[entity.qid]

        proj_t = rng.normal(scale=1.0 / np.sqrt(self.text_dim), size=(d, self.text_dim))
        proj_i = rng.normal(scale=1.0 / np.sqrt(img_dim), size=(d, img_dim))

        weights = self._channel_weights(config, n, tx, im)

        train = [(ent_index[t.head], rel_index[t.relation], ent_index[t.tail])
                 for t in dataset.train]
        train_set = set(train)
        lr = self.learning_rate
        loss_history = []

        def embed(i: int) -> np.ndarray:
            vec = weights[i, 0] * struct[i]
            if weights[i, 1]:
                vec = vec + weights[i, 1] * (proj_t @ tx[i])
            if weights[i, 2]:
                vec = vec + weights[i, 2] * (proj_i @ im[i])
            return vec

        for _ in range(self.epochs):
            epoch_loss = 0.0
            for idx in rng.permutation(len(train)):
                h, r, t = train[idx]
                for _ in range(self.negatives):
                    hn, tn = self._corrupt(rng, h, r, t, n, train_set)
                    d_pos = embed(h) + relations[r] - embed(t)
                    d_neg = embed(hn) + relations[r] - embed(tn)
                    pos = np.linalg.norm(d_pos)
                    neg = np.linalg.norm(d_neg)
                    loss = self.margin + pos - neg
                    if loss <= 0:
                        continue
                    epoch_loss += loss
                    u = d_pos / max(pos, _EPS)
                    v = d_neg / max(neg, _EPS)
                    relations[r] -= lr * (u - v)
                    struct[h] -= lr * weights[h, 0] * u
                    struct[t] += lr * weights[t, 0] * u
                    struct[hn] += lr * weights[hn, 0] * v
                    struct[tn] -= lr * weights[tn, 0] * v
                    if config.text:
                        grad_t = np.zeros_like(proj_t)
                        if weights[h, 1]:
                            grad_t += weights[h, 1] * np.outer(u, tx[h])
                        if weights[t, 1]:
                            grad_t -= weights[t, 1] * np.outer(u, tx[t])
                        if weights[hn, 1]:
                            grad_t -= weights[hn, 1] * np.outer(v, tx[hn])
                        if weights[tn, 1]:
                            grad_t += weights[tn, 1] * np.outer(v, tx[tn])
                        proj_t -= lr * grad_t
                    if config.image:
                        grad_i = np.zeros_like(proj_i)
                        if weights[h, 2]:
                            grad_i += weights[h, 2] * np.outer(u, im[h])
                        if weights[t, 2]:
                            grad_i -= weights[t, 2] * np.outer(u, im[t])
                        if weights[hn, 2]:
                            grad_i -= weights[hn, 2] * np.outer(v, im[hn])
                        if weights[tn, 2]:
                            grad_i += weights[tn, 2] * np.outer(v, im[tn])
                        proj_i -= lr * grad_i
            # keep structural vectors inside the unit ball between epochs
            norms = np.linalg.norm(struct, axis=1)
            over = norms > 1.0
            if over.any():
                struct[over] /= norms[over, None]
            loss_history.append(epoch_loss)

        self.config_ = config
        self.struct_ = struct
        self.relations_ = relations
        self.text_projection_ = proj_t
        self.image_projection_ = proj_i
        self.text_matrix_ = tx
        self.image_matrix_ = im
        self.weights_ = weights
        self.loss_history_ = loss_history
        self._ent_index = ent_index
        self._rel_index = rel_index
        self.entity_matrix_ = self._fuse_all()
        return self

    def _channel_weights(self, config: ModalityConfig, n: int,
                         tx: np.ndarray, im: np.ndarray) -> np.ndarray:
        base = np.asarray(self.gates if self.gates is not None else (1.0, 1.0, 1.0),
                          dtype=np.float64)
        if base.shape != (3,) or (base < 0).any() or base.sum() == 0:
            raise ValueError("gates must be three non-negative weights, not all zero")
        avail = np.zeros((n, 3), dtype=bool)
        avail[:, 0] = config.struct
        avail[:, 1] = config.text & (np.linalg.norm(tx, axis=1) > 0)
        avail[:, 2] = config.image & (np.linalg.norm(im, axis=1) > 0)
        weights = avail * base[None, :]
        totals = weights.sum(axis=1, keepdims=True)
        np.divide(weights, totals, out=weights, where=totals > 0)
        return weights

    @staticmethod
    def _corrupt(rng, h: int, r: int, t: int, n: int,
                 train_set: set[tuple[int, int, int]]) -> tuple[int, int]:
        corrupt_head = bool(rng.integers(0, 2))
        for _ in range(100):
            e = int(rng.integers(0, n))
            cand = (e, r, t) if corrupt_head else (h, r, e)
            if cand not in train_set:
                return (e, t) if corrupt_head else (h, e)
        return (e, t) if corrupt_head else (h, e)

    def _fuse_all(self) -> np.ndarray:
        fused = self.weights_[:, 0:1] * self.struct_
        if self.config_.text:
            fused = fused + self.weights_[:, 1:2] * (self.text_matrix_ @ self.text_projection_.T)
        if self.config_.image:
            fused = fused + self.weights_[:, 2:3] * (self.image_matrix_ @ self.image_projection_.T)
        return fused

    # -- scoring -----------------------------------------------------

    def entity_embedding(self, entity_id: str) -> np.ndarray:
        return self.entity_matrix_[self._ent_index[entity_id]]

    def relation_embedding(self, relation: str) -> np.ndarray:
        return self.relations_[self._rel_index[relation]]

    def score_triple(self, head: str, relation: str, tail: str) -> float:
        """Translational plausibility; higher is better."""
        diff = (self.entity_embedding(head) + self.relation_embedding(relation)
                - self.entity_embedding(tail))
        return float(-np.linalg.norm(diff))

    def score_all_tails(self, head: str, relation: str) -> np.ndarray:
        query = self.entity_embedding(head) + self.relation_embedding(relation)
        return -np.linalg.norm(query[None, :] - self.entity_matrix_, axis=1)

    def score_all_heads(self, relation: str, tail: str) -> np.ndarray:
        target = self.entity_embedding(tail) - self.relation_embedding(relation)
        return -np.linalg.norm(self.entity_matrix_ - target[None, :], axis=1)

    def entity_position(self, entity_id: str) -> int:
        return self._ent_index[entity_id]

    # -- persistence -------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(
            directory / "model.npz",
            struct=self.struct_,
            relations=self.relations_,
            text_projection=self.text_projection_,
            image_projection=self.image_projection_,
            text_matrix=self.text_matrix_,
            image_matrix=self.image_matrix_,
            weights=self.weights_,
            loss_history=np.asarray(self.loss_history_),
        )
        meta = {
            "params": self.get_params(),
            "entity_ids": self.entity_ids_,
            "relation_ids": self.relation_ids_,
        }
        (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "TranslationalLinkPredictor":
        directory = Path(directory)
        meta = json.loads((directory / "model.json").read_text())
        params = meta["params"]
        if params.get("gates") is not None:
            params["gates"] = tuple(params["gates"])
        model = cls(**params)
        arrays = np.load(directory / "model.npz")
        model.entity_ids_ = meta["entity_ids"]
        model.relation_ids_ = meta["relation_ids"]
        model.config_ = parse_modality(model.modality)
        model.struct_ = arrays["struct"]
        model.relations_ = arrays["relations"]
        model.text_projection_ = arrays["text_projection"]
        model.image_projection_ = arrays["image_projection"]
        model.text_matrix_ = arrays["text_matrix"]
        model.image_matrix_ = arrays["image_matrix"]
        model.weights_ = arrays["weights"]
        model.loss_history_ = arrays["loss_history"].tolist()
        model._ent_index = {eid: i for i, eid in enumerate(model.entity_ids_)}
        model._rel_index = {rid: i for i, rid in enumerate(model.relation_ids_)}
        model.entity_matrix_ = model._fuse_all()
        return model
