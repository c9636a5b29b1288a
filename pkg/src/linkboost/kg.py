"""Triple storage, vocabularies and per-relation pair sets.

Entities and relations get dense ids in first-appearance order over
train -> valid -> test. Forward relations occupy ``[0, R)``; the inverse of
relation ``r`` is ``r + R``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")

Pair = Tuple[int, int]


class DatasetError(ValueError):
    """Raised for unreadable or malformed dataset files."""


def inverse(rel: int, num_relations: int) -> int:
    """Map a relation id to its inverse (and back) over ``[0, 2R)``."""
    return (rel + num_relations) % (2 * num_relations)


@dataclass(frozen=True)
class PairSet:
    """Head/tail pairs connected by one relation."""

    rel: int
    pairs: frozenset = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, pair) -> bool:
        return pair in self.pairs

    def __iter__(self):
        return iter(self.pairs)

    @cached_property
    def by_head(self) -> Dict[int, frozenset]:
        out: Dict[int, set] = {}
        for h, t in self.pairs:
            out.setdefault(h, set()).add(t)
        return {h: frozenset(ts) for h, ts in out.items()}

    @cached_property
    def array(self) -> np.ndarray:
        """Pairs as a sorted ``(n, 2)`` int64 array (head-major)."""
        if not self.pairs:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(sorted(self.pairs), dtype=np.int64)

    def tails_of(self, head: int) -> frozenset:
        return self.by_head.get(head, frozenset())

    def heads(self) -> frozenset:
        return frozenset(h for h, _ in self.pairs)

    def tails(self) -> frozenset:
        return frozenset(t for _, t in self.pairs)


class TripleStore:
    """Train/valid/test triples over shared vocabularies.

    Triples are ``(n, 3)`` int64 arrays of ``(head, rel, tail)`` ids. After
    construction the store is treated as immutable.
    """

    def __init__(self, entities: Sequence[str], relations: Sequence[str],
                 train: np.ndarray, valid: np.ndarray, test: np.ndarray):
        self.entities = list(entities)
        self.relations = list(relations)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        self.train = _as_triples(train)
        self.valid = _as_triples(valid)
        self.test = _as_triples(test)
        for name in SPLITS:
            arr = getattr(self, name)
            if len(arr) and (arr[:, [0, 2]].max() >= self.num_entities
                             or arr[:, 1].max() >= self.num_relations
                             or arr.min() < 0):
                raise DatasetError(f"{name} split has ids outside the vocabulary")
        self._keys = set()
        for name in SPLITS:
            self._keys.update(self._encode(getattr(self, name)).tolist())

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        """Number of forward relations ``R``."""
        return len(self.relations)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def _encode(self, triples: np.ndarray) -> np.ndarray:
        E, R = self.num_entities, self.num_relations
        return (triples[:, 0] * R + triples[:, 1]) * E + triples[:, 2]

    def contains(self, head: int, rel: int, tail: int) -> bool:
        """Membership over the union of all splits.

        Inverse relation ids are accepted: ``(t, r + R, h)`` is known iff
        ``(h, r, t)`` is.
        """
        R = self.num_relations
        if rel >= R:
            head, rel, tail = tail, rel - R, head
        return ((head * R + rel) * self.num_entities + tail) in self._keys

    def __contains__(self, triple) -> bool:
        return self.contains(*triple)

    @cached_property
    def _known_tails(self) -> Dict[Tuple[int, int], np.ndarray]:
        R = self.num_relations
        out: Dict[Tuple[int, int], List[int]] = {}
        for name in SPLITS:
            for h, r, t in getattr(self, name).tolist():
                out.setdefault((h, r), []).append(t)
                out.setdefault((t, r + R), []).append(h)
        return {k: np.unique(np.array(v, dtype=np.int64)) for k, v in out.items()}

    def known_tails(self, head: int, rel: int) -> np.ndarray:
        """Sorted tails ``t`` with ``(head, rel, t)`` in any split (``rel`` may be inverse)."""
        return self._known_tails.get((head, rel), np.zeros(0, dtype=np.int64))

    def stats(self) -> Dict[str, int]:
        return {
            "entities": self.num_entities,
            "relations": self.num_relations,
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }

    def __repr__(self) -> str:
        s = self.stats()
        return (f"TripleStore(|E|={s['entities']}, |R|={s['relations']}, "
                f"train={s['train']}, valid={s['valid']}, test={s['test']})")


def _as_triples(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DatasetError(f"expected an (n, 3) triple array, got shape {arr.shape}")
    return arr


def _read_triples(path: str) -> List[Tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def load_dataset(train_path: str, valid_path: str, test_path: str) -> TripleStore:
    """Load a ``head<TAB>relation<TAB>tail`` dataset into a :class:`TripleStore`.

    Duplicates inside a split are dropped. A triple that already occurred in
    an earlier split is dropped from the later one so splits stay disjoint.

    Raises:
        DatasetError: a file is missing, a line does not have three fields,
            or the train split is empty.
    """
    paths = dict(zip(SPLITS, (train_path, valid_path, test_path)))
    raw = {}
    for name, path in paths.items():
        if not os.path.isfile(path):
            raise DatasetError(f"missing {name} file: {path}")
        raw[name] = _read_triples(path)
    if not raw["train"]:
        raise DatasetError(f"train split is empty: {train_path}")

    ent: Dict[str, int] = {}
    rel: Dict[str, int] = {}
    for name in SPLITS:
        for h, r, t in raw[name]:
            ent.setdefault(h, len(ent))
            rel.setdefault(r, len(rel))
            ent.setdefault(t, len(ent))

    seen: set = set()
    arrays = {}
    for name in SPLITS:
        kept, dups, cross = [], 0, 0
        local: set = set()
        for h, r, t in raw[name]:
            key = (ent[h], rel[r], ent[t])
            if key in local:
                dups += 1
                continue
            local.add(key)
            if key in seen:
                cross += 1
                continue
            kept.append(key)
        if dups:
            logger.info("%s: dropped %d duplicate triples", name, dups)
        if cross:
            logger.warning("%s: dropped %d triples already present in an earlier split",
                           name, cross)
        seen |= local
        arrays[name] = np.array(kept, dtype=np.int64).reshape(-1, 3)

    return TripleStore(list(ent), list(rel), arrays["train"], arrays["valid"], arrays["test"])


def load_dataset_dir(path: str) -> TripleStore:
    """Load ``train.txt``/``valid.txt``/``test.txt`` from one directory."""
    return load_dataset(*(os.path.join(path, f"{s}.txt") for s in SPLITS))


def save_store(store: TripleStore, directory: str) -> None:
    """Write vocabularies and id-encoded splits to ``directory``."""
    os.makedirs(directory, exist_ok=True)
    for fname, names in (("entities.tsv", store.entities), ("relations.tsv", store.relations)):
        with open(os.path.join(directory, fname), "w", encoding="utf-8", newline="\n") as f:
            for i, name in enumerate(names):
                f.write(f"{i}\t{name}\n")
    for name in SPLITS:
        with open(os.path.join(directory, f"{name}.ids"), "w", newline="\n") as f:
            for h, r, t in store.split(name).tolist():
                f.write(f"{h}\t{r}\t{t}\n")


def load_store(directory: str) -> TripleStore:
    """Inverse of :func:`save_store`; reproduces ids and split contents."""
    vocab = {}
    for fname in ("entities.tsv", "relations.tsv"):
        names = []
        with open(os.path.join(directory, fname), encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                idx, name = line.rstrip("\n").split("\t", 1)
                if int(idx) != lineno - 1:
                    raise DatasetError(f"{fname}:{lineno}: ids must be dense and ordered")
                names.append(name)
        vocab[fname] = names
    splits = {}
    for name in SPLITS:
        path = os.path.join(directory, f"{name}.ids")
        splits[name] = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2).reshape(-1, 3)
    return TripleStore(vocab["entities.tsv"], vocab["relations.tsv"],
                       splits["train"], splits["valid"], splits["test"])


def build_pair_sets(store: TripleStore) -> Dict[int, PairSet]:
    """Forward pair sets from the train split, one per relation id in ``[0, R)``."""
    buckets: Dict[int, List[Pair]] = {r: [] for r in range(store.num_relations)}
    for h, r, t in store.train.tolist():
        buckets[r].append((h, t))
    return {r: PairSet(r, frozenset(ps)) for r, ps in buckets.items()}


def inverse_pair_set(ps: PairSet, num_relations: int) -> PairSet:
    return PairSet(inverse(ps.rel, num_relations), frozenset((t, h) for h, t in ps.pairs))


def add_inverse_relations(pair_sets: Mapping[int, PairSet],
                          num_relations: Optional[int] = None) -> Dict[int, PairSet]:
    """Extend forward pair sets with inverses: ``G(r + R) = {(t, h) | (h, t) in G(r)}``."""
    R = num_relations if num_relations is not None else len(pair_sets)
    out = dict(pair_sets)
    for r in range(R):
        ps = pair_sets.get(r, PairSet(r))
        out[r + R] = inverse_pair_set(ps, R)
    return out


def triples_from_pairs(pair_sets: Iterable[PairSet]) -> np.ndarray:
    rows = [(h, ps.rel, t) for ps in pair_sets for h, t in sorted(ps.pairs)]
    return np.array(rows, dtype=np.int64).reshape(-1, 3)
