"""Filtered ranking metrics, per-relation breakdowns and score-averaging ensembles."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffkernels import sigmoid
from .graphstore import TripleStore
from .models import ModelParams, score_all_tails

HEAD_AND_TAIL = "head_and_tail"
TAIL_ONLY = "tail_only"
HITS_AT = (1, 3, 10)


class RankingError(ValueError):
    """A ranking precondition does not hold."""


def filtered_rank(scores, gold: int, exclude=()) -> int:
    """Mid-rank of ``gold`` after removing ``exclude`` from the candidates.

    ``rank = 1 + #{better} + ceil(#{tied, not gold} / 2)``.
    """
    scores = np.asarray(scores)
    exclude = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    if np.any(exclude == gold):
        raise RankingError(f"gold entity {gold} is in the exclusion set")
    s_gold = scores[gold]
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[exclude] = False
    better = int(np.count_nonzero(keep & (scores > s_gold)))
    tied = int(np.count_nonzero(keep & (scores == s_gold))) - 1
    return 1 + better + math.ceil(tied / 2)


def ensemble_scores(planes) -> np.ndarray:
    """Uniform average of congruent probability planes."""
    planes = [np.asarray(p, dtype=float) for p in planes]
    if not planes:
        raise ValueError("need at least one score plane")
    shape = planes[0].shape
    for p in planes[1:]:
        if p.shape != shape:
            raise ValueError(f"score plane shapes differ: {shape} vs {p.shape}")
    if len(planes) == 1:
        return planes[0]
    return np.mean(np.stack(planes), axis=0)


def predict_planes(models, h, r) -> np.ndarray:
    """Raw scores for a single model; averaged sigmoid probabilities for a list."""
    if isinstance(models, ModelParams):
        return score_all_tails(models, h, r)
    models = list(models)
    if len(models) == 1:
        return score_all_tails(models[0], h, r)
    return ensemble_scores([sigmoid(score_all_tails(m, h, r)) for m in models])


@dataclass
class RankingReport:
    mode: str
    mrr: float
    hits: dict
    n_test: int
    per_relation: dict = field(default_factory=dict)
    ranks: np.ndarray = field(default=None, repr=False)
    queries: np.ndarray = field(default=None, repr=False)

    def as_dict(self) -> dict:
        out = {"mode": self.mode, "n_test": self.n_test, "mrr": self.mrr}
        for n in HITS_AT:
            out[f"hits@{n}"] = self.hits[n]
        return out

    def to_text(self) -> str:
        """Stable ``key: value`` lines."""
        lines = [f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}" for k, v in self.as_dict().items()]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """``relation<TAB>direction<TAB>mrr<TAB>count`` rows."""
        rows = []
        for (rel, direction), (mrr, count) in sorted(self.per_relation.items()):
            rows.append(f"{rel}\t{direction}\t{mrr:.6f}\t{count}")
        return "\n".join(rows) + ("\n" if rows else "")


def _queries(store: TripleStore, split: str, mode: str) -> np.ndarray:
    """Rows ``(h, r, t, raw_relation, is_head_query)``; the model predicts ``t`` from ``(h, r)``."""
    raw = store.raw(split)
    tail = np.column_stack([raw, raw[:, 1], np.zeros(len(raw), dtype=np.int64)])
    if mode == TAIL_ONLY:
        return tail
    if mode != HEAD_AND_TAIL:
        raise RankingError(f"unknown evaluation mode {mode!r}")
    if not store.reciprocal:
        raise RankingError("head_and_tail evaluation needs a store with reciprocal relations")
    inv = store.inverse_relation(raw[:, 1])
    head = np.column_stack([raw[:, 2], inv, raw[:, 0], raw[:, 1], np.ones(len(raw), dtype=np.int64)])
    return np.concatenate([tail, head])


def rank_queries(models, store: TripleStore, queries: np.ndarray, batch_size: int = 512, threads: int = 1):
    def work(start):
        q = queries[start : start + batch_size]
        planes = predict_planes(models, q[:, 0], q[:, 1])
        out = np.empty(len(q), dtype=np.int64)
        for i, (h, r, t) in enumerate(q[:, :3].tolist()):
            exclude = np.fromiter(store.filter_candidates(h, r, t), dtype=np.int64)
            out[i] = filtered_rank(planes[i], t, exclude)
        return out

    starts = list(range(0, len(queries), batch_size))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def metrics(ranks) -> tuple[float, dict]:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise RankingError("no queries to rank")
    # exactly rounded sum, so the result does not depend on query order
    mrr = math.fsum(1.0 / ranks) / ranks.size
    hits = {n: float(np.mean(ranks <= n)) for n in HITS_AT}
    return mrr, hits


def _check_compat(models, store):
    for m in [models] if isinstance(models, ModelParams) else list(models):
        if m.n_entities != store.n_entities or m.n_relations != store.n_relations:
            raise RankingError(
                f"model has {m.n_entities} entities / {m.n_relations} relations, "
                f"store has {store.n_entities} / {store.n_relations}"
            )
        if m.vocabulary_hash is not None and m.vocabulary_hash != store.vocabulary_hash():
            raise RankingError("model was trained on a different vocabulary")


def evaluate(
    models,
    store: TripleStore,
    mode: str = HEAD_AND_TAIL,
    split: str = "test",
    per_relation: bool = False,
    split_direction: bool = False,
    batch_size: int = 512,
    threads: int = 1,
) -> RankingReport:
    """Filtered MRR and Hits@{1,3,10} over a split.

    ``models`` is one :class:`ModelParams` or a sequence of them (ensemble).
    In ``head_and_tail`` mode each raw triple contributes a tail query and a
    head query (the tail query of its reciprocal); ``tail_only`` ranks the
    tails of raw triples only.
    """
    _check_compat(models, store)
    queries = _queries(store, split, mode)
    ranks = rank_queries(models, store, queries, batch_size, threads)
    mrr, hits = metrics(ranks)
    report = RankingReport(mode, mrr, hits, len(ranks), ranks=ranks, queries=queries)
    if per_relation:
        report.per_relation = _group(store, queries, ranks, split_direction)
    return report


def _group(store, queries, ranks, split_direction):
    groups: dict = {}
    for (_, _, _, rel, is_head), rank in zip(queries.tolist(), ranks.tolist()):
        direction = ("head" if is_head else "tail") if split_direction else "both"
        groups.setdefault((store.relations[rel], direction), []).append(rank)
    return {key: (math.fsum(1.0 / np.asarray(v, dtype=float)) / len(v), len(v)) for key, v in groups.items()}


def per_relation_report(models, store: TripleStore, split_direction: bool = False, mode: str = HEAD_AND_TAIL, **kw):
    """:func:`evaluate` with the per-relation table filled in.

    Tail queries ``(h, r, ?)`` and head queries ``(?, r, t)`` are reported
    separately when ``split_direction`` is set.
    """
    return evaluate(models, store, mode, per_relation=True, split_direction=split_direction, **kw)
