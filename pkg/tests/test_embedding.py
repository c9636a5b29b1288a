import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference
from linkboost.embedding import (ROTATIONAL, TRANSLATIONAL, EmbeddingModel, EmbeddingTrainConfig,
                                 EmbeddingTrainer, _batch_loss, _sgd_kernel, adversarial_weights,
                                 distance, feature_vector, load_model, nll_loss, nll_loss_grad,
                                 pair_features, rotate_distance, save_model, tail_distances,
                                 transe_distance, train_embeddings)
from linkboost.synthetic import chain_kg, typed_kg


def transe(entity, relation, gamma=6.0):
    return EmbeddingModel(TRANSLATIONAL, np.array(entity, float), np.array(relation, float), gamma)


def rotate(entity, phases, gamma=6.0):
    ent = np.array(entity, dtype=complex)
    return EmbeddingModel(ROTATIONAL, np.concatenate([ent.real, ent.imag], axis=1),
                          np.array(phases, float), gamma)


def random_model(kind, rng, E=6, R=2, d=3, gamma=2.0):
    width = d * (2 if kind == ROTATIONAL else 1)
    rel = rng.uniform(0, 2 * math.pi, (R, d)) if kind == ROTATIONAL else rng.normal(size=(R, d))
    return EmbeddingModel(kind, rng.normal(size=(E, width)), rel, gamma)


class TestDistances:
    def test_translational_zero(self):
        m = transe([[0.0, 0.0]], [[0.0, 0.0]])
        assert transe_distance(m, 0, 0, 0) == 0.0

    def test_exact_translation(self):
        m = transe([[1, 0], [1, 1]], [[0, 1]])
        assert transe_distance(m, 0, 0, 1) == 0.0

    def test_hand_arithmetic(self):
        m = transe([[1, 2], [0, 0]], [[0.5, -1]])
        assert transe_distance(m, 0, 0, 1) == pytest.approx(math.sqrt(3.25), abs=1e-12)

    def test_identity_rotation(self):
        m = rotate([[1 + 2j, -1j]], [[0.0, 0.0]])
        assert rotate_distance(m, 0, 0, 0) == 0.0

    def test_exact_rotation(self):
        m = rotate([[1 + 0j], [1j]], [[math.pi / 2]])
        assert rotate_distance(m, 0, 0, 1) == pytest.approx(0.0, abs=1e-15)

    def test_rotation_squared_modulus(self):
        m = rotate([[1 + 0j], [1 + 0j]], [[math.pi / 2]])
        assert rotate_distance(m, 0, 0, 1) == pytest.approx(2.0, abs=1e-12)

    def test_kind_mismatch(self):
        with pytest.raises(ValueError):
            rotate_distance(transe([[0.0]], [[0.0]]), 0, 0, 0)
        with pytest.raises(ValueError):
            transe_distance(rotate([[1j]], [[0.0]]), 0, 0, 0)

    @pytest.mark.parametrize("kind", [TRANSLATIONAL, ROTATIONAL])
    def test_inverse_ids_swap_arguments(self, kind):
        m = random_model(kind, np.random.default_rng(0))
        R = m.num_relations
        assert distance(m, 2, 1 + R, 4) == distance(m, 4, 1, 2)

    @pytest.mark.parametrize("kind", [TRANSLATIONAL, ROTATIONAL])
    def test_tail_distances_match_pointwise(self, kind):
        m = random_model(kind, np.random.default_rng(1))
        ids = np.arange(m.num_entities)
        for rel in range(2 * m.num_relations):
            np.testing.assert_allclose(tail_distances(m, 3, rel), distance(m, 3, rel, ids),
                                       rtol=1e-12, atol=1e-12)


class TestAdversarialWeights:
    def test_singleton(self):
        m = transe([[0.0], [1.0]], [[0.0]])
        assert adversarial_weights(m, [(0, 0, 1)]).tolist() == [1.0]

    def test_equal_distances_uniform(self):
        m = transe([[0.0], [1.0], [-1.0]], [[0.0]])
        np.testing.assert_allclose(adversarial_weights(m, [(0, 0, 1), (0, 0, 2)]), [0.5, 0.5])

    def test_hand_softmax(self):
        # gamma - d = (0, ln 3)
        m = transe([[0.0], [2.0], [2.0 - math.log(3)]], [[0.0]], gamma=2.0)
        p = adversarial_weights(m, [(0, 0, 1), (0, 0, 2)], alpha=1.0)
        np.testing.assert_allclose(p, [0.25, 0.75], rtol=0, atol=1e-12)


class TestNllLoss:
    def test_all_at_margin(self):
        m = transe([[0.0], [6.0], [-6.0]], [[0.0]], gamma=6.0)
        loss = nll_loss(m, (0, 0, 1), [(0, 0, 1), (0, 0, 2)])
        assert loss == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_hand_arithmetic(self):
        m = transe([[0.0], [0.0], [2.0]], [[0.0]], gamma=1.0)
        loss = nll_loss(m, (0, 0, 1), [(0, 0, 2)])
        assert loss == pytest.approx(-2 * math.log(1 / (1 + math.exp(-1))), abs=1e-12)
        assert loss == pytest.approx(0.62652, abs=1e-5)

    @given(arrays(float, (4, 3), elements=st.floats(-50, 50)), st.floats(0.1, 30),
           st.floats(0, 3))
    def test_finite_and_nonnegative(self, ent, gamma, alpha):
        m = EmbeddingModel(TRANSLATIONAL, ent, ent[:1].copy(), gamma)
        loss = nll_loss(m, (0, 0, 1), [(0, 0, 2), (3, 0, 1), (2, 0, 2)], alpha)
        assert math.isfinite(loss) and loss >= 0

    @pytest.mark.parametrize("kind", [TRANSLATIONAL, ROTATIONAL])
    def test_gradient_matches_finite_differences(self, kind):
        rng = np.random.default_rng(7)
        for _ in range(5):
            m = random_model(kind, rng)
            pos = (0, 1, 2)
            neg = [(0, 1, 3), (4, 1, 2), (5, 1, 2)]
            p = adversarial_weights(m, neg, 1.0)
            # with the weights frozen the loss is a plain function of the parameters
            def frozen():
                dp = distance(m, *pos)
                dn = distance(m, *np.array(neg).T)
                return (np.logaddexp(0, dp - m.gamma)
                        + np.sum(p * np.logaddexp(0, m.gamma - dn)))
            _, ge, gr = nll_loss_grad(m, pos, neg, 1.0)
            ne = central_difference(frozen, m.entity, 1e-6)
            nr = central_difference(frozen, m.relation, 1e-6)
            np.testing.assert_allclose(ge, ne, rtol=1e-5, atol=1e-7)
            np.testing.assert_allclose(gr, nr, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("kind", [TRANSLATIONAL, ROTATIONAL])
def test_compiled_step_matches_numpy_route(kind):
    rng = np.random.default_rng(3)
    m = random_model(kind, rng, E=8, R=3, d=4)
    pos = rng.integers(0, [8, 3, 8], size=(5, 3))
    neg = rng.integers(0, [8, 3, 8], size=(5, 4, 3))
    loss, ((ei, eg), (ri, rg)) = _batch_loss(m, pos, neg, 0.7, with_grad=True)
    want_e, want_r = m.entity.copy(), m.relation.copy()
    np.add.at(want_e, ei, -0.3 * eg)
    np.add.at(want_r, ri, -0.3 * rg)
    if kind == ROTATIONAL:
        want_r %= 2 * math.pi
    buffers = (np.zeros_like(m.entity), np.zeros_like(m.relation), np.zeros(8, bool),
               np.zeros(3, bool))
    total = _sgd_kernel(m.entity, m.relation, pos, neg, m.gamma, 0.7, kind == ROTATIONAL, 0.3,
                        *buffers)
    assert total == pytest.approx(loss.sum(), rel=1e-12)
    np.testing.assert_allclose(m.entity, want_e, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(m.relation, want_r, rtol=1e-12, atol=1e-12)
    assert not any(b.any() for b in buffers)


@pytest.mark.parametrize("kind", [TRANSLATIONAL, ROTATIONAL])
def test_training_halves_loss_on_chain(kind):
    cfg = EmbeddingTrainConfig(kind=kind, dim=8, steps=2000, batch_size=64, negatives=4,
                               learning_rate=0.1, log_every=100)
    trainer = EmbeddingTrainer(chain_kg(6), cfg)
    first = trainer.train_step()
    trainer.run()
    assert trainer.history[-1][1] < 0.5 * first


@pytest.mark.parametrize("kind", [TRANSLATIONAL, ROTATIONAL])
def test_fixed_seed_is_bitwise_reproducible(kind):
    store = typed_kg(seed=2)
    cfg = EmbeddingTrainConfig(kind=kind, dim=6, steps=150, batch_size=32, negatives=8)
    m1, m2 = train_embeddings(store, cfg), train_embeddings(store, cfg)
    assert m1.entity.tobytes() == m2.entity.tobytes()
    assert m1.relation.tobytes() == m2.relation.tobytes()


def test_resume_continues_step_count_and_stream(tmp_path):
    store = typed_kg(seed=2)
    cfg = EmbeddingTrainConfig(dim=6, steps=120, batch_size=32, negatives=8, log_every=40)
    straight = EmbeddingTrainer(store, cfg).run()
    first = EmbeddingTrainer(store, cfg)
    first.run(until=80)
    path = str(tmp_path / "m.bin")
    first.save_checkpoint(path)
    resumed = EmbeddingTrainer.resume(store, cfg, path)
    assert resumed.step == 80
    resumed.run()
    assert resumed.step == 120
    assert resumed.model.entity.tobytes() == straight.entity.tobytes()


def test_divergence_aborts():
    from linkboost.embedding import DivergenceError
    cfg = EmbeddingTrainConfig(dim=4, steps=50, batch_size=8, negatives=2, learning_rate=1e308)
    with pytest.raises(DivergenceError):
        train_embeddings(chain_kg(6), cfg)


class TestFeatures:
    def test_real_concatenation(self):
        m = transe([[1, 2], [3, 4]], [[0, 0]])
        assert feature_vector(m, 0, 1).tolist() == [1, 2, 3, 4]

    def test_same_entity_halves_equal(self):
        m = random_model(TRANSLATIONAL, np.random.default_rng(0))
        v = feature_vector(m, 2, 2)
        assert v[: len(v) // 2].tolist() == v[len(v) // 2:].tolist()

    def test_complex_layout(self):
        m = rotate([[1 + 2j], [3 + 4j]], [[0.0]])
        assert feature_vector(m, 0, 1).tolist() == [1, 2, 3, 4]

    def test_pair_features_rows(self):
        m = random_model(ROTATIONAL, np.random.default_rng(0))
        X = pair_features(m, [1, 2], [3, 4], dtype=np.float64)
        assert X.tolist() == [feature_vector(m, 1, 3).tolist(), feature_vector(m, 2, 4).tolist()]


class TestModelFile:
    @pytest.mark.parametrize("kind", [TRANSLATIONAL, ROTATIONAL])
    def test_round_trip(self, tmp_path, kind):
        m = random_model(kind, np.random.default_rng(5), E=5, R=2, d=3, gamma=4.5)
        p = str(tmp_path / "m.bin")
        save_model(m, p)
        back = load_model(p)
        assert back.kind == kind and back.gamma == 4.5
        assert back.entity.tobytes() == m.entity.tobytes()
        assert back.relation.tobytes() == m.relation.tobytes()

    def test_header_layout(self, tmp_path):
        m = rotate([[1 + 2j], [3 + 4j]], [[0.5]], gamma=6.0)
        p = tmp_path / "m.bin"
        save_model(m, str(p))
        raw = p.read_bytes()
        assert raw[:8] == b"KGEMBED\x00"
        assert raw[8:12] == b"\x01\x00\x01\x01"
        assert int.from_bytes(raw[12:20], "little") == 2
        assert len(raw) == 44 + 8 * (2 * 2 + 1)
        assert np.frombuffer(raw[44:76], "<f8").tolist() == [1, 2, 3, 4]

    def test_truncated_file_rejected(self, tmp_path):
        m = transe([[1.0], [2.0]], [[0.0]])
        p = tmp_path / "m.bin"
        save_model(m, str(p))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="size"):
            load_model(str(p))
