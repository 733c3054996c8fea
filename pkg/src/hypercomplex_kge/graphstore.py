"""Triple ingestion, vocabularies, reciprocal augmentation and lookup indexes."""

from __future__ import annotations

import hashlib
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECIPROCAL_SUFFIX = "_reverse"
SPLITS = ("train", "valid", "test")


class TripleParseError(ValueError):
    """A triple file line is malformed."""

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


def load_triples(path) -> list[tuple[str, str, str]]:
    """Read ``head<TAB>relation<TAB>tail`` lines; duplicates are kept in order."""
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\r\n").split("\t")
            if len(fields) != 3:
                raise TripleParseError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            h, r, t = (f.strip() for f in fields)
            if not (h and r and t):
                raise TripleParseError(path, lineno, "empty entity or relation name")
            if r.endswith(RECIPROCAL_SUFFIX):
                raise TripleParseError(path, lineno, f"relation {r!r} uses the reserved suffix {RECIPROCAL_SUFFIX!r}")
            triples.append((h, r, t))
    return triples


def reciprocal_name(relation: str) -> str:
    return relation + RECIPROCAL_SUFFIX


@dataclass
class TripleStore:
    """Id-mapped splits of a knowledge graph plus the KvsAll and filter indexes.

    ``train``/``valid``/``test`` are ``(n, 3)`` integer arrays holding the raw
    triples followed, when ``reciprocal`` is set, by one reciprocal triple per
    raw triple in the same order.  Raw relation ``k`` has reciprocal id
    ``k + n_raw_relations``.
    """

    entities: list[str]
    relations: list[str]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    reciprocal: bool
    n_raw_relations: int
    kvsall_index: dict = field(repr=False, default_factory=dict)
    filter_index: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.kvsall_index and len(self.train):
            self.kvsall_index = _index(self.train)
        if not self.filter_index:
            self.filter_index = _index(np.concatenate([self.train, self.valid, self.test]))

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def raw(self, split: str) -> np.ndarray:
        arr = getattr(self, split)
        return arr[: len(arr) // 2] if self.reciprocal else arr

    def inverse_relation(self, r):
        if not self.reciprocal:
            raise ValueError("store was built without reciprocal relations")
        r = np.asarray(r)
        return np.where(r < self.n_raw_relations, r + self.n_raw_relations, r - self.n_raw_relations)

    def train_pairs(self) -> np.ndarray:
        """Distinct training ``(h, r)`` pairs in first-appearance order."""
        _, first = np.unique(self.train[:, :2], axis=0, return_index=True)
        return self.train[np.sort(first), :2]

    def kvsall_targets(self, h: int, r: int, smoothing: float = 0.0) -> np.ndarray:
        return kvsall_targets(self, h, r, smoothing)

    def kvsall_batch(self, pairs: np.ndarray, smoothing: float = 0.0) -> np.ndarray:
        y = np.zeros((len(pairs), self.n_entities))
        for i, (h, r) in enumerate(pairs):
            tails = self.kvsall_index.get((int(h), int(r)))
            if tails:
                y[i, list(tails)] = 1.0
        return smooth(y, smoothing)

    def filter_candidates(self, h: int, r: int, gold: int) -> set[int]:
        return filter_candidates(self, h, r, gold)

    def vocabulary_hash(self) -> str:
        digest = hashlib.sha256()
        for name in self.entities:
            digest.update(b"E" + name.encode("utf-8") + b"\0")
        for name in self.relations:
            digest.update(b"R" + name.encode("utf-8") + b"\0")
        return digest.hexdigest()

    def counts(self) -> dict:
        """Raw and unique triple counts per split plus vocabulary sizes."""
        out = {"entities": self.n_entities, "relations": self.n_raw_relations}
        for split in SPLITS:
            raw = self.raw(split)
            out[split] = len(raw)
            out[f"{split}_unique"] = len(np.unique(raw, axis=0)) if len(raw) else 0
        return out

    def strip_reciprocals(self) -> dict[str, list[tuple[str, str, str]]]:
        """Named raw triples per split, recovered from the augmented store."""
        out = {}
        for split in SPLITS:
            out[split] = [
                (self.entities[h], self.relations[r], self.entities[t]) for h, r, t in self.raw(split).tolist()
            ]
        return out

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "entities": self.entities,
            "relations": self.relations,
            "reciprocal": self.reciprocal,
            "n_raw_relations": self.n_raw_relations,
            **{split: getattr(self, split).tolist() for split in SPLITS},
        }

    @classmethod
    def from_dict(cls, data: dict) -> TripleStore:
        return cls(
            entities=list(data["entities"]),
            relations=list(data["relations"]),
            reciprocal=bool(data["reciprocal"]),
            n_raw_relations=int(data["n_raw_relations"]),
            **{split: np.asarray(data[split], dtype=np.int64).reshape(-1, 3) for split in SPLITS},
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> TripleStore:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _index(triples: np.ndarray) -> dict:
    index = defaultdict(set)
    for h, r, t in triples.tolist():
        index[(h, r)].add(t)
    return dict(index)


def smooth(y: np.ndarray, smoothing: float) -> np.ndarray:
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {smoothing}")
    if smoothing == 0.0:
        return y
    return y * (1.0 - smoothing) + smoothing / y.shape[-1]


def build_store(train, valid=(), test=(), add_reciprocals: bool = True) -> TripleStore:
    """Map named triples to ids and build the indexes.

    Vocabularies follow first appearance over train, then valid, then test.
    """
    splits = {"train": list(train), "valid": list(valid), "test": list(test)}
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    for split in SPLITS:
        for h, r, t in splits[split]:
            if not (h and r and t):
                raise ValueError(f"empty name in triple {(h, r, t)!r}")
            if r.endswith(RECIPROCAL_SUFFIX):
                raise ValueError(f"relation {r!r} uses the reserved suffix {RECIPROCAL_SUFFIX!r}")
            ent_ids.setdefault(h, len(ent_ids))
            rel_ids.setdefault(r, len(rel_ids))
            ent_ids.setdefault(t, len(ent_ids))
    n_raw = len(rel_ids)
    relations = list(rel_ids)
    if add_reciprocals:
        relations += [reciprocal_name(r) for r in rel_ids]

    arrays = {}
    for split in SPLITS:
        ids = np.array(
            [(ent_ids[h], rel_ids[r], ent_ids[t]) for h, r, t in splits[split]], dtype=np.int64
        ).reshape(-1, 3)
        if add_reciprocals:
            rev = np.stack([ids[:, 2], ids[:, 1] + n_raw, ids[:, 0]], axis=1)
            ids = np.concatenate([ids, rev])
        arrays[split] = ids
    return TripleStore(
        entities=list(ent_ids),
        relations=relations,
        reciprocal=add_reciprocals,
        n_raw_relations=n_raw,
        **arrays,
    )


def load_dataset(path, add_reciprocals: bool = True) -> TripleStore:
    """Load ``train.txt``, ``valid.txt`` and ``test.txt`` from a directory."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    splits = {}
    for split in SPLITS:
        f = path / f"{split}.txt"
        if not f.exists():
            raise FileNotFoundError(f"missing split file: {f}")
        splits[split] = load_triples(f)
    return build_store(splits["train"], splits["valid"], splits["test"], add_reciprocals)


def resolve_dataset(name_or_path, root=None) -> Path:
    """Accept a dataset directory or a name under ``$HCKGE_DATA`` / ``root``."""
    p = Path(name_or_path)
    if p.is_dir():
        return p
    root = root or os.environ.get("HCKGE_DATA")
    if root and (Path(root) / name_or_path).is_dir():
        return Path(root) / name_or_path
    return p


def kvsall_targets(store: TripleStore, h: int, r: int, smoothing: float = 0.0) -> np.ndarray:
    """Multi-hot target plane over all entities for one ``(h, r)`` pair."""
    y = np.zeros(store.n_entities)
    tails = store.kvsall_index.get((int(h), int(r)))
    if tails:
        y[list(tails)] = 1.0
    return smooth(y, smoothing)


def filter_candidates(store: TripleStore, h: int, r: int, gold: int) -> set[int]:
    """Known tails of ``(h, r)`` across all splits, minus the gold tail."""
    return set(store.filter_index.get((int(h), int(r)), ())) - {int(gold)}
