import numpy as np
import pytest
from hypothesis import given, strategies as st

from linkboost.gbt import GbtConfig, LabeledMatrix, TreeEnsemble, train_ensemble
from linkboost.kg import PairSet
from linkboost.relations import build_profile
from linkboost.sampling import (NAIVE, RCWC, NegativeBatch, adversarial_negatives, dump_batches,
                                load_batches, naive_candidates, naive_negatives, rcwc_candidates,
                                rcwc_negatives, select_adversarial)

a, b, c, d = 0, 1, 2, 3


def ps(pairs, rel=0):
    return PairSet(rel, frozenset(pairs))


class TestNaive:
    def test_full_enumeration(self):
        g = ps([(a, b)])
        assert naive_candidates((a, b), g, 3).tolist() == [a, c]
        batch = naive_negatives(0, (a, b), 10, g, 3, np.random.default_rng(0))
        assert batch.as_set() == {(a, a), (a, c)}

    def test_exhaustion_returns_all(self):
        g = ps([(a, b), (a, c)])
        batch = naive_negatives(0, (a, b), 5, g, 6, np.random.default_rng(0))
        assert len(batch) == 4

    @pytest.mark.parametrize("E", [10, 200, 5000])
    def test_distinct_and_not_positive(self, E):
        rng = np.random.default_rng(E)
        g = ps([(0, t) for t in range(0, min(E, 40), 3)])
        batch = naive_negatives(0, (0, 0), 8, g, E, rng)
        tails = batch.pairs[:, 1].tolist()
        assert len(tails) == len(set(tails)) == min(8, E - len(g))
        assert not any((0, t) in g for t in tails)
        assert all(h == 0 for h in batch.pairs[:, 0])


class TestRcwc:
    def profile_fixture(self):
        x = 10
        heads = range(20, 25)
        pairs = [(h, b) for h in heads] + [(h, c) for h in heads] + [(a, b), (x, d)]
        g = ps(pairs)
        return g, build_profile(g, folds=2)

    def test_cooccurrence_exclusion_example(self):
        g, prof = self.profile_fixture()
        assert prof.range == {b, c, d}
        assert prof.cooc.count(b, c) == 5 and prof.cooc.count(b, d) == 0
        assert rcwc_candidates((a, b), g, prof, 1).tolist() == [d]
        batch = rcwc_negatives(0, (a, b), 4, g, prof, 1, np.random.default_rng(0))
        assert batch.as_set() == {(a, d)} and batch.strategy == RCWC

    def test_infinite_threshold_is_range_restricted_naive(self):
        g, prof = self.profile_fixture()
        E = 30
        want = set(naive_candidates((a, b), g, E).tolist()) & prof.range
        assert set(rcwc_candidates((a, b), g, prof, np.inf).tolist()) == want

    def test_full_range_infinite_threshold_equals_naive(self):
        E = 4
        g = ps([(h, t) for h in range(E) for t in range(E) if (h + t) % 3])
        prof = build_profile(g)
        assert prof.range == set(range(E))
        for pos in g.pairs:
            assert (rcwc_candidates(pos, g, prof, np.inf).tolist()
                    == naive_candidates(pos, g, E).tolist())

    def test_empty_set_falls_back_to_naive(self):
        g = ps([(a, b), (c, b)])
        prof = build_profile(g)
        batch = rcwc_negatives(0, (a, b), 3, g, prof, 1, np.random.default_rng(0), num_entities=4)
        assert batch.strategy == NAIVE
        assert batch.as_set() == {(a, a), (a, c), (a, d)}


class TestAdversarial:
    def test_threshold_and_order(self):
        pairs = np.array([[0, 1], [0, 2], [0, 3]])
        kept, scores = select_adversarial(pairs, np.array([0.9, 0.4, 0.7]), 0.5)
        assert kept.tolist() == [[0, 1], [0, 3]] and scores.tolist() == [0.9, 0.7]

    def test_empty_ensemble_keeps_whole_pool(self):
        pool = NegativeBatch(0, (0, 1), np.array([[0, 2], [0, 3], [0, 4]]), NAIVE)
        ens = TreeEnsemble(4, 0.1, [])
        out = adversarial_negatives(0, pool, ens, np.zeros((5, 2), np.float32), 0.5)
        assert out.as_set() == pool.as_set()

    def test_subset_of_pool(self):
        rng = np.random.default_rng(0)
        ent = rng.normal(size=(30, 2)).astype(np.float32)
        X = np.concatenate([ent[rng.integers(0, 30, 80)], ent[rng.integers(0, 30, 80)]], axis=1)
        ens = train_ensemble(LabeledMatrix(X, rng.integers(0, 2, 80).astype(float)),
                             GbtConfig(num_estimators=10))
        pool = NegativeBatch(0, (1, 2), np.stack([np.full(29, 1), np.arange(1, 30)], 1), NAIVE)
        out = adversarial_negatives(0, pool, ens, ent, 0.5)
        assert out.as_set() <= pool.as_set()
        assert np.all(out.scores >= 0.5)
        assert np.all(np.diff(out.scores) <= 0)


kg_pairs = st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11)), min_size=1, max_size=40)


@given(kg_pairs, st.integers(0, 3), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_chain_adv_rcwc_naive_and_no_positives(pairs, delta, count, seed):
    E = 12
    g = ps(pairs)
    prof = build_profile(g)
    rng = np.random.default_rng(seed)
    ent = rng.normal(size=(E, 2)).astype(np.float32)
    ens = TreeEnsemble(4, 0.5, [])
    X = np.concatenate([ent[g.array[:, 0]], ent[g.array[:, 1]]], axis=1)
    if len(X) > 1:
        ens = train_ensemble(LabeledMatrix(np.concatenate([X, X[::-1]]),
                                           np.r_[np.ones(len(X)), np.zeros(len(X))]),
                             GbtConfig(num_estimators=3))
    for pos in sorted(g.pairs):
        naive = set(naive_candidates(pos, g, E).tolist())
        rc = set(rcwc_candidates(pos, g, prof, delta).tolist())
        assert rc <= naive
        batch = rcwc_negatives(0, pos, count, g, prof, delta, rng, num_entities=E)
        tails = {t for _, t in batch.as_set()}
        assert tails <= (rc if batch.strategy == RCWC else naive)
        adv = adversarial_negatives(0, batch, ens, ent, 0.5)
        assert adv.as_set() <= batch.as_set()
        for h, t in adv.as_set() | batch.as_set():
            assert h == pos[0] and (h, t) not in g


def test_batches_round_trip(tmp_path):
    batches = [NegativeBatch(3, (1, 2), np.array([[1, 5], [1, 6]]), RCWC),
               NegativeBatch(4, (0, 0), np.zeros((0, 2), np.int64), NAIVE)]
    path = str(tmp_path / "b.jsonl")
    dump_batches(batches, path)
    back = load_batches(path)
    assert [(x.rel, x.positive, x.strategy, x.pairs.tolist()) for x in back] == \
        [(x.rel, x.positive, x.strategy, x.pairs.tolist()) for x in batches]
