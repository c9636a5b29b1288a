"""Relation priors: subrelation detection, positive augmentation, ranges,
tail co-occurrence and the local-closed-world (lcw) index."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .kg import PairSet

logger = logging.getLogger(__name__)


def inference_index(r1: int, r2: int, pair_sets: Mapping[int, PairSet]) -> float:
    """Fraction of the pairs of ``r2`` that are also pairs of ``r1``.

    Returns 0 when ``r2`` has no pairs.
    """
    g2 = pair_sets[r2].pairs
    if not g2:
        logger.debug("inference_index(%d | %d): empty pair set for %d", r1, r2, r2)
        return 0.0
    g1 = pair_sets[r1].pairs
    small, big = (g1, g2) if len(g1) < len(g2) else (g2, g1)
    return sum(1 for p in small if p in big) / len(g2)


def detect_subrelations(pair_sets: Mapping[int, PairSet],
                        threshold: float) -> List[Tuple[int, int]]:
    """All ``(r1, r2)`` with ``r1 != r2`` and ``infer(r1 | r2) > threshold``, sorted.

    Overlaps are counted through a pair -> relations index, so only relation
    pairs that share at least one pair are ever compared.
    """
    owners: Dict[Tuple[int, int], List[int]] = {}
    for r in sorted(pair_sets):
        for p in pair_sets[r].pairs:
            owners.setdefault(p, []).append(r)

    links = []
    for r2 in sorted(pair_sets):
        g2 = pair_sets[r2].pairs
        if not g2:
            continue
        overlap: Counter = Counter()
        for p in g2:
            for r1 in owners[p]:
                if r1 != r2:
                    overlap[r1] += 1
        for r1 in sorted(overlap):
            if overlap[r1] / len(g2) > threshold:
                links.append((r1, r2))
    return sorted(links)


def augment_positives(pair_sets: Mapping[int, PairSet],
                      links: Iterable[Tuple[int, int]]) -> Dict[int, PairSet]:
    """Borrow positives along subrelation links.

    For every link ``(r1, r2)`` the set of ``r1`` grows by the original set
    of ``r2``. A one-way link leaves ``r2`` untouched; mutual links make both
    relations share the union. Right-hand sides always use the
    pre-augmentation sets, so there is no transitive closure.
    """
    extra: Dict[int, set] = {}
    for r1, r2 in links:
        extra.setdefault(r1, set()).update(pair_sets[r2].pairs)
    out = {}
    for r, ps in pair_sets.items():
        if r in extra and not extra[r] <= ps.pairs:
            out[r] = PairSet(r, ps.pairs | frozenset(extra[r]))
        else:
            out[r] = ps
    return out


def compute_range(pair_set: PairSet) -> frozenset:
    return pair_set.tails()


def co_occurrence(pair_set: PairSet, t: int, t2: int) -> int:
    """Number of heads linked to both ``t`` and ``t2``."""
    return sum(1 for tails in pair_set.by_head.values() if t in tails and t2 in tails)


def lcw_index(pair_set: PairSet, folds: int = 5, seed: int = 0) -> float:
    """Local-closed-world index of a relation.

    Pairs are ordered by head id (ties in a seeded random order) and dealt
    round-robin into ``folds`` folds, so the pairs of one head are spread
    across folds. A pair counts as "unseen" when its tail does not occur in
    any other fold; the unseen fraction is ``1 - lcw``.

    With fewer pairs than folds, leave-one-out is used instead.
    """
    n = len(pair_set)
    if n == 0:
        return 0.0
    if n < folds:
        logger.debug("lcw_index: %d pairs < %d folds for relation %d; using leave-one-out",
                     n, folds, pair_set.rel)
        folds = n
    pairs = pair_set.array
    rng = np.random.default_rng([seed, pair_set.rel])
    perm = rng.permutation(n)
    order = perm[np.argsort(pairs[perm, 0], kind="stable")]
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % folds
    return lcw_from_folds(pairs[:, 1], fold_of)


def lcw_from_folds(tails: Sequence[int], fold_of: Sequence[int]) -> float:
    """``1 - unseen / n`` for an explicit fold assignment of the pairs' tails."""
    n = len(tails)
    if n == 0:
        return 0.0
    # per tail: how many folds contain it, and its count in each fold
    per_fold = Counter(zip(np.asarray(tails).tolist(), np.asarray(fold_of).tolist()))
    n_folds_with = Counter(t for t, _ in per_fold)
    unseen = sum(c for (t, _), c in per_fold.items() if n_folds_with[t] == 1)
    return 1.0 - unseen / n


class CooccurrenceTable:
    """Symmetric tail x tail co-occurrence counts for one relation.

    Stored as CSR over local indices into the sorted ``range_ids``. Only
    counts strictly above ``floor`` are retained (``floor=0`` keeps all).
    """

    def __init__(self, range_ids: np.ndarray, matrix: sp.csr_matrix, floor: float = 0):
        self.range_ids = np.asarray(range_ids, dtype=np.int64)
        self.matrix = matrix.tocsr()
        self.floor = floor

    @classmethod
    def from_pairs(cls, pair_set: PairSet) -> "CooccurrenceTable":
        pairs = pair_set.array
        range_ids = np.unique(pairs[:, 1]) if len(pairs) else np.zeros(0, dtype=np.int64)
        if not len(pairs):
            return cls(range_ids, sp.csr_matrix((0, 0), dtype=np.int64))
        heads, head_local = np.unique(pairs[:, 0], return_inverse=True)
        tail_local = np.searchsorted(range_ids, pairs[:, 1])
        inc = sp.csr_matrix((np.ones(len(pairs), dtype=np.int64), (head_local, tail_local)),
                            shape=(len(heads), len(range_ids)))
        return cls(range_ids, (inc.T @ inc).tocsr())

    def local(self, t: int) -> int:
        i = int(np.searchsorted(self.range_ids, t))
        if i < len(self.range_ids) and self.range_ids[i] == t:
            return i
        return -1

    def count(self, t: int, t2: int) -> int:
        i, j = self.local(t), self.local(t2)
        if i < 0 or j < 0:
            return 0
        return int(self.matrix[i, j])

    def above(self, t: int, threshold: float) -> np.ndarray:
        """Entity ids ``t2`` with ``co-occur(t, t2) > threshold``."""
        if threshold < self.floor:
            raise ValueError(f"table only keeps counts above {self.floor}; "
                             f"cannot answer threshold {threshold}")
        i = self.local(t)
        if i < 0:
            return np.zeros(0, dtype=np.int64)
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        cols = self.matrix.indices[lo:hi][self.matrix.data[lo:hi] > threshold]
        return self.range_ids[np.sort(cols)]

    def entries(self, threshold: float = 0) -> List[Tuple[int, int, int]]:
        """Upper-triangle (incl. diagonal) entries with count above ``threshold``."""
        coo = sp.triu(self.matrix).tocoo()
        keep = coo.data > threshold
        rows = self.range_ids[coo.row[keep]]
        cols = self.range_ids[coo.col[keep]]
        out = sorted(zip(rows.tolist(), cols.tolist(), coo.data[keep].tolist()))
        return [(int(a), int(b), int(c)) for a, b, c in out]

    @classmethod
    def from_entries(cls, range_ids, entries, floor) -> "CooccurrenceTable":
        range_ids = np.asarray(range_ids, dtype=np.int64)
        n = len(range_ids)
        if not entries:
            return cls(range_ids, sp.csr_matrix((n, n), dtype=np.int64), floor)
        a, b, c = (np.array(x, dtype=np.int64) for x in zip(*entries))
        i, j = np.searchsorted(range_ids, a), np.searchsorted(range_ids, b)
        off = i != j
        rows = np.concatenate([i, j[off]])
        cols = np.concatenate([j, i[off]])
        data = np.concatenate([c, c[off]])
        return cls(range_ids, sp.csr_matrix((data, (rows, cols)), shape=(n, n)), floor)


@dataclass
class RelationProfile:
    rel: int
    range: frozenset
    cooc: CooccurrenceTable
    lcw: float
    subrelations: List[int] = field(default_factory=list)

    @property
    def range_ids(self) -> np.ndarray:
        return self.cooc.range_ids


def build_profile(pair_set: PairSet, subrelations: Sequence[int] = (),
                  folds: int = 5, seed: int = 0) -> RelationProfile:
    return RelationProfile(
        rel=pair_set.rel,
        range=compute_range(pair_set),
        cooc=CooccurrenceTable.from_pairs(pair_set),
        lcw=lcw_index(pair_set, folds, seed),
        subrelations=sorted(subrelations),
    )


def build_profiles(pair_sets: Mapping[int, PairSet], links: Iterable[Tuple[int, int]] = (),
                   folds: int = 5, seed: int = 0) -> Dict[int, RelationProfile]:
    subs: Dict[int, List[int]] = {}
    for r1, r2 in links:
        subs.setdefault(r1, []).append(r2)
    return {r: build_profile(pair_sets[r], subs.get(r, ()), folds, seed)
            for r in sorted(pair_sets)}


def save_profiles(profiles: Mapping[int, RelationProfile], path: str,
                  cooc_threshold: float) -> None:
    """One JSON record per line; co-occurrence entries above ``cooc_threshold`` only."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in sorted(profiles):
            p = profiles[r]
            rec = {
                "rel": p.rel,
                "range": p.range_ids.tolist(),
                "lcw": p.lcw,
                "subrelations": list(p.subrelations),
                "cooc_floor": cooc_threshold,
                "cooc": [list(e) for e in p.cooc.entries(cooc_threshold)],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_profiles(path: str) -> Dict[int, RelationProfile]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            range_ids = np.array(rec["range"], dtype=np.int64)
            out[rec["rel"]] = RelationProfile(
                rel=rec["rel"],
                range=frozenset(rec["range"]),
                cooc=CooccurrenceTable.from_entries(range_ids, rec["cooc"], rec["cooc_floor"]),
                lcw=rec["lcw"],
                subrelations=rec["subrelations"],
            )
    return out
