"""Tail-corruption negative samplers for relation classifiers.

Three strategies, nested by construction for a fixed positive ``(h, t)``:

* naive -- any entity ``t'`` with ``(h, t')`` not a positive;
* rcwc -- naive restricted to the relation's range, minus tails that
  co-occur with ``t`` more than ``delta_rcwc`` times;
* adversarial -- pool negatives the partial ensemble still scores at or
  above ``tau``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .gbt import sigmoid
from .kg import PairSet
from .relations import RelationProfile

logger = logging.getLogger(__name__)

NAIVE, RCWC, ADVERSARIAL = "naive", "rcwc", "adversarial"


@dataclass
class NegativeBatch:
    rel: int
    positive: Tuple[int, int]
    pairs: np.ndarray
    strategy: str
    scores: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.pairs)

    def as_set(self) -> set:
        return {(int(h), int(t)) for h, t in self.pairs}


def _batch(rel, positive, tails, strategy, scores=None) -> NegativeBatch:
    tails = np.asarray(tails, dtype=np.int64)
    pairs = np.stack([np.full(len(tails), positive[0], dtype=np.int64), tails], axis=1)
    return NegativeBatch(rel, (int(positive[0]), int(positive[1])), pairs, strategy, scores)


def naive_candidates(positive, positives: PairSet, num_entities: int) -> np.ndarray:
    """Every tail a naive corruption of ``positive`` may produce, ascending."""
    mask = np.ones(num_entities, dtype=bool)
    known = positives.tails_of(positive[0])
    if known:
        mask[np.fromiter(known, dtype=np.int64)] = False
    return np.flatnonzero(mask)


def naive_negatives(rel: int, positive, count: int, positives: PairSet, num_entities: int,
                    rng: np.random.Generator) -> NegativeBatch:
    """Up to ``count`` distinct uniform tail corruptions not in ``positives``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    h = positive[0]
    known = positives.tails_of(h)
    n_valid = num_entities - len(known)
    if n_valid <= count:
        if n_valid < count:
            logger.debug("naive: only %d candidates for head %d in relation %d (wanted %d)",
                         n_valid, h, rel, count)
        cands = naive_candidates(positive, positives, num_entities)
        return _batch(rel, positive, rng.permutation(cands), NAIVE)

    if n_valid < 4 * count:
        cands = naive_candidates(positive, positives, num_entities)
        return _batch(rel, positive, rng.choice(cands, size=count, replace=False), NAIVE)

    # rejection sampling: candidates are plentiful
    chosen: List[int] = []
    taken = set()
    while len(chosen) < count:
        for t in rng.integers(0, num_entities, size=2 * (count - len(chosen))).tolist():
            if t in known or t in taken:
                continue
            taken.add(t)
            chosen.append(t)
            if len(chosen) == count:
                break
    return _batch(rel, positive, chosen, NAIVE)


def rcwc_candidates(positive, positives: PairSet, profile: RelationProfile,
                    delta_rcwc: float) -> np.ndarray:
    """Range members ``t'`` with ``(h, t')`` unseen and co-occurrence with ``t`` at most ``delta_rcwc``."""
    h, t = positive
    range_ids = profile.range_ids
    mask = np.ones(len(range_ids), dtype=bool)
    known = positives.tails_of(h)
    if known:
        k = np.fromiter(known, dtype=np.int64)
        idx = np.searchsorted(range_ids, k)
        ok = idx < len(range_ids)
        idx, k = idx[ok], k[ok]
        mask[idx[range_ids[idx] == k]] = False
    if np.isfinite(delta_rcwc):
        close = profile.cooc.above(t, delta_rcwc)
        if len(close):
            mask[np.searchsorted(range_ids, close)] = False
    return range_ids[mask]


def rcwc_negatives(rel: int, positive, count: int, positives: PairSet,
                   profile: RelationProfile, delta_rcwc: float, rng: np.random.Generator,
                   num_entities: Optional[int] = None) -> NegativeBatch:
    """Range-constrained corruptions that avoid heavily co-occurring tails.

    Falls back to :func:`naive_negatives` when no candidate survives (that
    needs ``num_entities``).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    cands = rcwc_candidates(positive, positives, profile, delta_rcwc)
    if len(cands) == 0:
        if num_entities is None:
            return _batch(rel, positive, [], RCWC)
        logger.debug("rcwc: empty candidate set for %s in relation %d; using naive", positive, rel)
        return naive_negatives(rel, positive, count, positives, num_entities, rng)
    if len(cands) <= count:
        return _batch(rel, positive, rng.permutation(cands), RCWC)
    return _batch(rel, positive, rng.choice(cands, size=count, replace=False), RCWC)


def select_adversarial(pairs: np.ndarray, scores: np.ndarray, tau: float = 0.5,
                       count: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Rows with ``score >= tau``, highest first (ties keep pool order), at most ``count``."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.flatnonzero(scores >= tau)
    keep = keep[np.argsort(-scores[keep], kind="stable")]
    if count is not None:
        keep = keep[:count]
    return np.asarray(pairs)[keep], scores[keep]


def adversarial_negatives(rel: int, base_pool: NegativeBatch, ensemble, entity: np.ndarray,
                          tau: float = 0.5, count: Optional[int] = None) -> NegativeBatch:
    """Pool negatives that the partial ensemble still misclassifies.

    ``entity`` is the feature matrix the ensemble was trained on (one row
    per entity, same dtype as training features).
    """
    pairs = base_pool.pairs
    if len(pairs) == 0:
        return NegativeBatch(rel, base_pool.positive, pairs, ADVERSARIAL, np.zeros(0))
    scores = sigmoid(ensemble.margin_pair_rows(entity, pairs[:, 0], pairs[:, 1]))
    kept, kept_scores = select_adversarial(pairs, scores, tau, count)
    return NegativeBatch(rel, base_pool.positive, kept, ADVERSARIAL, kept_scores)


def dump_batches(batches: Iterable[NegativeBatch], path: str) -> None:
    """JSON-lines debug dump: relation, positive pair, negative pairs, strategy."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for b in batches:
            rec = {"rel": b.rel, "positive": list(b.positive),
                   "negatives": b.pairs.tolist(), "strategy": b.strategy}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_batches(path: str) -> List[NegativeBatch]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            pairs = np.array(rec["negatives"], dtype=np.int64).reshape(-1, 2)
            out.append(NegativeBatch(rec["rel"], tuple(rec["positive"]), pairs, rec["strategy"]))
    return out
