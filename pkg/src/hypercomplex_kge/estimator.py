"""scikit-learn style wrapper around :func:`~hypercomplex_kge.train.fit`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .diffkernels import sigmoid
from .evaluation import HEAD_AND_TAIL, TAIL_ONLY, evaluate, filtered_rank, metrics
from .graphstore import TripleStore, build_store, reciprocal_name
from .models import score_all_tails
from .train import TrainConfig, fit

_DEFAULTS = TrainConfig()


def check_triples(X, n_entities=None, n_relations=None) -> np.ndarray:
    """Validate an ``(n, 3)`` integer array of ``(head, relation, tail)`` ids."""
    X = check_array(X, dtype=np.int64, ensure_2d=True)
    if X.shape[1] != 3:
        raise ValueError(f"expected (n, 3) triples, got shape {X.shape}")
    return _check_ids(X, [0, 2], [1], n_entities, n_relations)


def check_pairs(X, n_entities=None, n_relations=None) -> np.ndarray:
    """Validate an ``(n, 2)`` integer array of ``(head, relation)`` ids."""
    X = check_array(X, dtype=np.int64, ensure_2d=True)
    if X.shape[1] != 2:
        raise ValueError(f"expected (n, 2) pairs, got shape {X.shape}")
    return _check_ids(X, [0], [1], n_entities, n_relations)


def _check_ids(X, ent_cols, rel_cols, n_entities, n_relations):
    if X.min(initial=0) < 0:
        raise ValueError("ids must be non-negative")
    if n_entities is not None and X[:, ent_cols].max(initial=-1) >= n_entities:
        raise ValueError(f"entity id out of range (n_entities={n_entities})")
    if n_relations is not None and X[:, rel_cols].max(initial=-1) >= n_relations:
        raise ValueError(f"relation id out of range (n_relations={n_relations})")
    return X


class HypercomplexKGE(BaseEstimator):
    """Link-prediction estimator for QMult, OMult, ConvQ and ConvO.

    ``fit`` accepts a :class:`TripleStore`, a sequence of string triples, or
    an ``(n, 3)`` id array (reciprocal relations are added for id arrays
    with ids ``k + n_relations``).  ``predict`` returns the top-scoring tail
    for each ``(head, relation)`` row and ``score`` the filtered MRR on id
    triples.
    """

    def __init__(
        self,
        model_kind=_DEFAULTS.model_kind,
        norm_mode=_DEFAULTS.norm_mode,
        d=_DEFAULTS.d,
        n_filters=_DEFAULTS.n_filters,
        kernel_size=_DEFAULTS.kernel_size,
        input_dropout=_DEFAULTS.input_dropout,
        feature_dropout=_DEFAULTS.feature_dropout,
        hidden_dropout=_DEFAULTS.hidden_dropout,
        embed_dropout=_DEFAULTS.embed_dropout,
        product_dropout=_DEFAULTS.product_dropout,
        lr=_DEFAULTS.lr,
        batch_size=_DEFAULTS.batch_size,
        epochs=_DEFAULTS.epochs,
        label_smoothing=_DEFAULTS.label_smoothing,
        seed=_DEFAULTS.seed,
        precision=_DEFAULTS.precision,
    ):
        self.model_kind = model_kind
        self.norm_mode = norm_mode
        self.d = d
        self.n_filters = n_filters
        self.kernel_size = kernel_size
        self.input_dropout = input_dropout
        self.feature_dropout = feature_dropout
        self.hidden_dropout = hidden_dropout
        self.embed_dropout = embed_dropout
        self.product_dropout = product_dropout
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.label_smoothing = label_smoothing
        self.seed = seed
        self.precision = precision

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def _as_store(self, X) -> TripleStore:
        if isinstance(X, TripleStore):
            return X
        arr = np.asarray(X)
        if arr.dtype.kind in "iu":
            ids = check_triples(arr)
            n_rel = int(ids[:, 1].max()) + 1
            raw_rel = [f"r{i}" for i in range(n_rel)]
            rev = np.stack([ids[:, 2], ids[:, 1] + n_rel, ids[:, 0]], axis=1)
            empty = np.zeros((0, 3), dtype=np.int64)
            return TripleStore(
                entities=[f"e{i}" for i in range(int(ids[:, [0, 2]].max()) + 1)],
                relations=raw_rel + [reciprocal_name(r) for r in raw_rel],
                train=np.concatenate([ids, rev]),
                valid=empty,
                test=empty,
                reciprocal=True,
                n_raw_relations=n_rel,
            )
        return build_store([tuple(map(str, row)) for row in X])

    def fit(self, X, y=None):
        """Train on ``X``; ``y`` is ignored and present for API compatibility."""
        config = self._config()
        self.store_ = self._as_store(X)
        self.params_, self.logs_ = fit(self.store_, config)
        self.n_entities_ = self.store_.n_entities
        self.n_relations_ = self.store_.n_relations
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw scores ``(n, n_entities)`` of every entity as tail for each pair."""
        check_is_fitted(self, "params_")
        X = check_pairs(X, self.n_entities_, self.n_relations_)
        return score_all_tails(self.params_, X[:, 0], X[:, 1])

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        """Highest-scoring tail id per ``(head, relation)`` row."""
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y=None) -> float:
        """Filtered MRR of the tails of id triples ``X`` (filtering by the training store plus ``X``)."""
        check_is_fitted(self, "params_")
        X = check_triples(X, self.n_entities_, self.n_relations_)
        scores = self.decision_function(X[:, :2])
        known = {}
        for h, r, t in np.concatenate([self.store_.train, self.store_.valid, self.store_.test, X]).tolist():
            known.setdefault((h, r), set()).add(t)
        ranks = [
            filtered_rank(scores[i], t, np.fromiter(known[(h, r)] - {t}, dtype=np.int64))
            for i, (h, r, t) in enumerate(X.tolist())
        ]
        return metrics(ranks)[0]

    def evaluate(self, store: TripleStore | None = None, mode: str = HEAD_AND_TAIL, split: str = "test"):
        """Full :func:`~hypercomplex_kge.evaluation.evaluate` report on a store."""
        check_is_fitted(self, "params_")
        return evaluate(self.params_, store or self.store_, mode, split)


__all__ = ["HEAD_AND_TAIL", "TAIL_ONLY", "HypercomplexKGE", "check_pairs", "check_triples"]
