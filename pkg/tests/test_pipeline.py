import json
import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_store
from oracles import brute_rank, known_with_inverses
from linkboost.embedding import EmbeddingTrainConfig, distance, train_embeddings
from linkboost.gbt import GbtConfig, dumps_ensemble, logistic_loss, sigmoid
from linkboost.kg import PairSet
from linkboost.pipeline import (ABLATIONS, MetricsReport, PipelineConfig, RankResult,
                                RelationScorer, RelationTrainingLog, ablation_run,
                                embedding_scorers, evaluate, filtered_rank, lcwa_gate, lcwa_score,
                                prepare, rank_from_scores, run_pipeline, train_relation,
                                write_report)
from linkboost.relations import build_profile
from linkboost.synthetic import random_kg, typed_kg


@pytest.fixture(scope="module")
def toy():
    store = typed_kg(seed=1)
    model = train_embeddings(store, EmbeddingTrainConfig(dim=8, steps=300))
    return store, model


def small_config(**kw):
    base = dict(negatives=4, gbt=GbtConfig(num_estimators=12, max_depth=3))
    base.update(kw)
    return PipelineConfig(**base)


class TestConfig:
    def test_stage_boundary(self):
        cfg = PipelineConfig(gbt=GbtConfig(num_estimators=1000), stage_fraction=0.5)
        assert cfg.stage_sizes() == [500, 500]

    def test_no_staging(self):
        cfg = PipelineConfig(gbt=GbtConfig(num_estimators=1000), stage_fraction=0.0)
        assert cfg.stage_sizes() == [1000]

    def test_refreshes_split_second_stage(self):
        cfg = PipelineConfig(gbt=GbtConfig(num_estimators=11), stage_fraction=0.5,
                             refresh_count=2)
        assert cfg.stage_sizes() == [6, 3, 2]
        assert sum(cfg.stage_sizes()) == 11

    @pytest.mark.parametrize("kw", [dict(stage_fraction=1.0), dict(delta_sub=1.5),
                                    dict(delta_lcw=-0.1), dict(delta_rcwc=-1),
                                    dict(adversarial_mode="x"), dict(base_strategy="y")])
    def test_invalid_values(self, kw):
        with pytest.raises(ValueError):
            PipelineConfig(**kw)

    def test_unknown_ablation(self):
        with pytest.raises(ValueError, match="unknown ablation"):
            PipelineConfig().ablate(["nope"])

    def test_ablation_flags(self):
        cfg = PipelineConfig().ablate(ABLATIONS)
        assert not (cfg.use_relation_inference or cfg.use_rcwc or cfg.use_lcwa)


def profile_with(range_ids, lcw):
    prof = build_profile(PairSet(0, frozenset((0, t) for t in range_ids)))
    prof.lcw = lcw
    return prof


class TestLcwaScore:
    def test_out_of_range_zeroed(self):
        assert lcwa_score(0, 9, 0.7, profile_with([1, 2], 0.95), 0.9) == 0.0

    def test_in_range_kept(self):
        assert lcwa_score(0, 1, 0.7, profile_with([1, 2], 0.95), 0.9) == 0.7

    def test_open_relation_unchanged(self):
        assert lcwa_score(0, 9, 0.7, profile_with([1, 2], 0.5), 0.9) == 0.7

    @given(st.lists(st.floats(0, 1), min_size=10, max_size=10),
           st.sets(st.integers(0, 9), min_size=1), st.floats(0, 1))
    def test_gate_never_touches_in_range(self, scores, rng_ids, lcw):
        prof = profile_with(sorted(rng_ids), lcw)
        s = np.array(scores)
        out = lcwa_gate(s, prof, 0.9)
        for t in range(10):
            assert out[t] == lcwa_score(0, t, s[t], prof, 0.9)
            if t in rng_ids:
                assert out[t] == s[t]


class TestFilteredRank:
    def test_strictly_highest(self):
        assert rank_from_scores(np.array([0.1, 0.9, 0.2]), 1, np.array([], int)) == (1, 3)

    def test_three_higher(self):
        scores = np.array([0.9, 0.8, 0.7, 0.5, 0.1])
        rank, _ = rank_from_scores(scores, 3, np.array([], int))
        rep = MetricsReport.from_ranks([RankResult(0, 0, 3, rank, 5)])
        assert rank == 4 and rep.mrr == 0.25 and rep.hits[3] == 0.0 and rep.hits[10] == 1.0

    def test_filtering_known_candidate_improves_rank(self):
        store = make_store([(0, 0, 1)], test=[(0, 0, 2)], entities=[f"e{i}" for i in range(4)])
        scores = np.array([0.0, 0.9, 0.5, 0.1])
        filt = filtered_rank((0, 0, 2), store, lambda h: scores)
        raw, _ = rank_from_scores(scores, 2, np.array([], int))
        assert filt.rank == raw - 1 == 1
        assert filt.rank == brute_rank(known_with_inverses(store), (0, 0, 2), scores)

    def test_ties_rounded_half_up(self):
        assert rank_from_scores(np.zeros(4), 0, np.array([], int))[0] == 3  # 1 + ceil(3/2)
        assert rank_from_scores(np.zeros(5), 0, np.array([], int))[0] == 3

    @given(st.integers(0, 2 ** 31), st.integers(2, 12), st.booleans())
    def test_matches_brute_force(self, seed, E, coarse):
        rng = np.random.default_rng(seed)
        store = random_kg(E, 2, 3 * E, rng)
        known = known_with_inverses(store)
        R = store.num_relations
        for h, r, t in store.test.tolist():
            for q in ((h, r, t), (t, r + R, h)):
                scores = rng.integers(0, 3, E).astype(float) if coarse else rng.random(E)
                got = filtered_rank(q, store, lambda head: scores)
                assert got.rank == brute_rank(known, q, scores)
                assert 1 <= got.rank <= got.candidates


class TestMetrics:
    def test_single_rank_one(self):
        rep = MetricsReport.from_ranks([RankResult(0, 0, 1, 1, 10)])
        assert rep.metrics() == {"MR": 1.0, "MRR": 1.0, "H@1": 1.0, "H@3": 1.0, "H@10": 1.0}

    def test_two_ranks(self):
        rep = MetricsReport.from_ranks([RankResult(0, 0, 1, 1, 10), RankResult(0, 0, 2, 4, 10)])
        assert rep.mrr == 0.625 and rep.hits[3] == 0.5 and rep.mr == 2.5

    def test_all_equal_scores(self):
        E = 9
        store = make_store([(0, 0, 1)], test=[(2, 0, 3)], entities=[f"e{i}" for i in range(E)])
        flat = {r: (lambda h: np.zeros(E)) for r in range(2)}
        rep = evaluate(store, flat)
        # nothing else is known for either query, so every entity stays a candidate
        counts = [rank_from_scores(np.zeros(E), 3, store.known_tails(2, 0))[1],
                  rank_from_scores(np.zeros(E), 2, store.known_tails(3, 1))[1]]
        assert counts == [E, E]
        assert rep.mr == (E + 1) / 2

    def test_report_fields_and_outputs(self, tmp_path):
        rep = MetricsReport.from_ranks([RankResult(0, 0, 1, 2, 10), RankResult(1, 1, 0, 7, 10)],
                                       relation_names=lambda r: f"rel{r}")
        write_report(rep, str(tmp_path), {"seed": 0})
        body = json.loads((tmp_path / "metrics.json").read_text())
        assert set(body["metrics"]) == {"MR", "MRR", "H@1", "H@3", "H@10"}
        assert "both directions" in body["note"]
        csv = (tmp_path / "metrics_per_relation.csv").read_text().splitlines()
        assert csv[0] == "relation,name,count,MR,MRR,H@1,H@3,H@10"
        assert csv[1].startswith("0,rel0,1,2.0,0.5")
        assert json.loads((tmp_path / "manifest.json").read_text()) == {"seed": 0}
        assert "MRR" in (tmp_path / "metrics.txt").read_text()

    def test_missing_scorer_uses_fallback_and_logs(self, toy, caplog):
        store, model = toy
        scorers = embedding_scorers(model, 2 * store.num_relations)
        partial = {r: s for r, s in scorers.items() if r != 0}
        with pytest.raises(KeyError):
            evaluate(store, partial)
        with caplog.at_level(logging.WARNING):
            rep = evaluate(store, partial, fallback=lambda r: scorers[r])
        assert "fallback" in caplog.text
        assert rep.to_json() == evaluate(store, scorers).to_json()


class TestTraining:
    def test_too_few_positives(self, toy):
        store, model = toy
        g = PairSet(0, frozenset({(0, 1), (2, 3)}))
        assert train_relation(0, g, build_profile(g), model, small_config()) is None

    def test_single_stage_tree_count(self, toy):
        store, model = toy
        prep = prepare(store, small_config())
        ens = train_relation(0, prep.positives[0], prep.profiles[0], model,
                             small_config(stage_fraction=0.0))
        assert len(ens) == 12

    def test_refresh_mines_from_fresh_pool(self, toy):
        store, model = toy
        cfg = small_config(negatives=1, gbt=GbtConfig(num_estimators=40))
        prep = prepare(store, cfg)
        log = RelationTrainingLog(0, keep_pools=True)
        train_relation(0, prep.positives[0], prep.profiles[0], model, cfg, None, log)
        assert log.adversarial and log.adversarial[0] > 0
        pos = prep.positives[0]
        for pairs in log.pools:
            assert not any((h, t) in pos for h, t in pairs.tolist())

    def test_staged_training_fits_union_pool_at_least_as_well(self, toy):
        store, model = toy
        cfg = small_config(negatives=1, gbt=GbtConfig(num_estimators=40))
        prep = prepare(store, cfg)
        ent = model.entity.astype(np.float32)
        checked = 0
        for rel in range(3):
            log = RelationTrainingLog(rel, keep_pools=True)
            staged = train_relation(rel, prep.positives[rel], prep.profiles[rel], model, cfg,
                                    None, log)
            if sum(log.adversarial) == 0:
                continue
            single = train_relation(rel, prep.positives[rel], prep.profiles[rel], model,
                                    replace(cfg, stage_fraction=0.0))
            pos, union = prep.positives[rel].array, np.concatenate(log.pools)

            def loss(ens):
                mp = ens.margin_pair_rows(ent, pos[:, 0], pos[:, 1])
                mn = ens.margin_pair_rows(ent, union[:, 0], union[:, 1])
                return logistic_loss(1.0, mp).sum() + logistic_loss(0.0, mn).sum()

            assert loss(staged) <= loss(single)
            checked += 1
        assert checked > 0

    def test_fallback_scorer_is_squashed_distance(self, toy):
        store, model = toy
        s = RelationScorer(3, model, None, use_lcwa=False)
        ids = np.arange(store.num_entities)
        np.testing.assert_allclose(s(5), sigmoid(model.gamma - distance(model, 5, 3, ids)),
                                   rtol=1e-12)


class TestPipeline:
    def test_report_invariants(self, toy):
        store, model = toy
        rep = run_pipeline(store, model, small_config()).report
        assert rep.hits[1] <= rep.hits[3] <= rep.hits[10]
        assert 0 < rep.mrr <= 1 and 1 <= rep.mr <= store.num_entities
        assert rep.count == 2 * len(store.test)

    def test_deterministic(self, toy):
        store, model = toy
        r1 = run_pipeline(store, model, small_config())
        r2 = run_pipeline(store, model, small_config())
        assert r1.report.to_json() == r2.report.to_json()
        for rel, ens in r1.ensembles.items():
            if ens is not None:
                assert dumps_ensemble(ens, rel) == dumps_ensemble(r2.ensembles[rel], rel)

    def test_threads_do_not_change_results(self, toy):
        store, model = toy
        r1 = run_pipeline(store, model, small_config())
        r2 = run_pipeline(store, model, small_config(threads=3))
        assert r1.report.to_json() == r2.report.to_json()

    def test_all_ablations_equal_plain_baseline(self, toy):
        store, model = toy
        plain = small_config(use_relation_inference=False, use_rcwc=False, use_lcwa=False)
        assert (ablation_run(store, model, small_config(), ABLATIONS).to_json()
                == run_pipeline(store, model, plain).report.to_json())

    def test_disabling_inference_removes_links(self, toy):
        store, _ = toy
        assert prepare(store, small_config()).links
        assert prepare(store, small_config(use_relation_inference=False)).links == []
