"""Small typed knowledge graphs with planted structure, for tests and smoke runs."""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .kg import TripleStore


def typed_kg(num_types: int = 4, per_type: int = 25, num_relations: int = 6,
             groups: int = 5, tails_per_head: int = 2, subrelations: int = 1,
             valid_fraction: float = 0.05, test_fraction: float = 0.1,
             seed: int = 0) -> TripleStore:
    """A typed graph where each relation links one entity type to another.

    Entities of a type are split into ``groups`` clusters. A relation maps a
    head in cluster ``c`` to ``tails_per_head`` tails drawn from a fixed
    cluster of the range type, so ranges are proper subsets of the entity
    set and tails co-occur within clusters. The last ``subrelations``
    relations copy about 80% of an earlier relation's pairs.
    """
    rng = np.random.default_rng(seed)
    E = num_types * per_type
    entities = [f"t{k}_e{i}" for k in range(num_types) for i in range(per_type)]
    base = num_relations - subrelations
    if base < 1:
        raise ValueError("need at least one non-derived relation")
    relations = [f"rel{r}" for r in range(num_relations)]

    triples: List[Tuple[int, int, int]] = []
    pairs_of = {}
    for r in range(base):
        dom, rng_type = rng.integers(0, num_types, size=2)
        shift = int(rng.integers(0, groups))
        heads = np.arange(dom * per_type, (dom + 1) * per_type)
        pairs = set()
        for h in heads.tolist():
            cluster = ((h % per_type) % groups + shift) % groups
            members = [rng_type * per_type + i for i in range(per_type) if i % groups == cluster]
            k = min(tails_per_head, len(members))
            for t in rng.choice(members, size=k, replace=False).tolist():
                pairs.add((h, int(t)))
        pairs_of[r] = sorted(pairs)
        triples.extend((h, r, t) for h, t in pairs_of[r])
    for r in range(base, num_relations):
        src = pairs_of[int(rng.integers(0, base))]
        keep = rng.random(len(src)) < 0.8
        triples.extend((h, r, t) for (h, t), k in zip(src, keep) if k)

    arr = np.array(sorted(set(triples)), dtype=np.int64)
    arr = arr[rng.permutation(len(arr))]
    n_test = int(round(test_fraction * len(arr)))
    n_valid = int(round(valid_fraction * len(arr)))
    test, valid, train = arr[:n_test], arr[n_test:n_test + n_valid], arr[n_test + n_valid:]
    return TripleStore(entities, relations, train, valid, test)


def chain_kg(num_entities: int = 6) -> TripleStore:
    """``e0 -next-> e1 -next-> ... -> e{n-1}``, all in train."""
    entities = [f"e{i}" for i in range(num_entities)]
    train = np.array([(i, 0, i + 1) for i in range(num_entities - 1)], dtype=np.int64)
    empty = np.zeros((0, 3), dtype=np.int64)
    return TripleStore(entities, ["next"], train, empty, empty)


def random_kg(num_entities: int, num_relations: int, num_triples: int,
              rng: np.random.Generator, test_fraction: float = 0.2) -> TripleStore:
    """Uniformly random triples (deduplicated) split into train and test."""
    h = rng.integers(0, num_entities, size=num_triples)
    r = rng.integers(0, num_relations, size=num_triples)
    t = rng.integers(0, num_entities, size=num_triples)
    arr = np.unique(np.stack([h, r, t], axis=1), axis=0)
    arr = arr[rng.permutation(len(arr))]
    n_test = max(1, int(test_fraction * len(arr))) if len(arr) > 1 else 0
    entities = [f"e{i}" for i in range(num_entities)]
    relations = [f"r{i}" for i in range(num_relations)]
    return TripleStore(entities, relations, arr[n_test:], np.zeros((0, 3), dtype=np.int64),
                       arr[:n_test])
