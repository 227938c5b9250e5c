import logging
import math

import numpy as np
import pytest
from scipy.stats import chisquare

from cgcd import (
    HyperParams,
    estimate_prototypes,
    finite_difference_check,
    hardness_distribution,
    knowledge_distillation_loss,
    old_class_objective,
    prototype_replay_loss,
    sample_replay_features,
    shared_radius,
)
from cgcd.model import ModelState, init_model
from cgcd.retention import PrototypeStore
from cgcd.rng import substream
from cgcd.validation import DataError


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def unit_rows(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def store_with(protos, radius=0.1, tau_h=0.1):
    store = PrototypeStore(radius=radius, tau_h=tau_h)
    for c, mu in enumerate(protos):
        store.add(c, np.asarray(mu, dtype=np.float64), 0)
    store.recompute_hardness()
    return store


class TestEstimatePrototypes:
    def test_constant_class_mean(self):
        v = unit([1.0, 2.0, 2.0])
        z = np.tile(v, (5, 1))
        protos = estimate_prototypes(z, np.zeros(5, dtype=int), [0])
        assert np.allclose(protos[0], v)

    def test_cancelling_members_fall_back_to_head(self, caplog):
        v = unit([1.0, 0.0, 0.0])
        z = np.vstack([v, -v])
        heads = np.array([[0.0, 2.0, 0.0]])
        with caplog.at_level(logging.WARNING):
            protos = estimate_prototypes(z, np.zeros(2, dtype=int), [0], fallback_heads=heads)
        assert np.allclose(protos[0], [0.0, 1.0, 0.0])
        assert any("fell back" in r.message for r in caplog.records)

    def test_matches_group_mean_oracle(self):
        z = unit_rows(50, 6, 1)
        ids = np.random.default_rng(2).integers(0, 4, 50)
        protos = estimate_prototypes(z, ids, range(4), fallback_heads=np.eye(6)[:4])
        for c in range(4):
            members = z[ids == c]
            mu = members.mean(axis=0)
            assert np.allclose(protos[c], mu / np.linalg.norm(mu))

    def test_target_outside_label_space_is_error(self):
        z = unit_rows(4, 3, 3)
        with pytest.raises(DataError, match="outside"):
            estimate_prototypes(z, np.zeros(4, dtype=int), [5], fallback_heads=np.eye(3))


class TestSharedRadius:
    def test_zero_variance(self):
        v = unit([1.0, 1.0, 0.0, 0.0])
        z = np.tile(v, (6, 1))
        labels = np.array([0, 0, 0, 1, 1, 1])
        assert shared_radius(z, labels, 2) == 0.0

    def test_matches_direct_covariance_oracle(self):
        z = np.vstack([np.eye(4)[:2], np.eye(4)[2:]])
        labels = np.array([0, 0, 1, 1])
        # each class: mean (e_i + e_j)/2, per-member deviation norm^2 = 1/2
        expected = math.sqrt(((0.5 + 0.5) / 2) / 4)
        assert shared_radius(z, labels, 2) == pytest.approx(expected)

    def test_homogeneous_scaling(self):
        rng = np.random.default_rng(4)
        base = unit([1.0, 0, 0, 0])
        dev = rng.standard_normal((8, 4)) * 0.1
        dev -= dev.mean(axis=0)
        z1 = base + dev
        z2 = base + 3.0 * dev
        labels = np.zeros(8, dtype=int)
        r1 = shared_radius(z1, labels, 1)
        r2 = shared_radius(z2, labels, 1)
        assert r2 == pytest.approx(3.0 * r1)

    def test_empty_class_is_error(self):
        z = unit_rows(3, 4, 5)
        with pytest.raises(DataError):
            shared_radius(z, np.zeros(3, dtype=int), 2)


class TestHardnessDistribution:
    def test_two_prototypes_split_evenly(self):
        p = hardness_distribution(unit_rows(2, 4, 6), 0.1)
        assert np.allclose(p, [0.5, 0.5])

    def test_orthogonal_prototypes_uniform(self):
        p = hardness_distribution(np.eye(3), 0.1)
        assert np.allclose(p, np.full(3, 1 / 3))

    def test_worked_example(self):
        # pairwise cosines 0.9 / 0 / 0 -> h = [0.45, 0.45, 0]
        theta = math.acos(0.9)
        mus = np.array(
            [
                [1.0, 0.0, 0.0, 0.0],
                [math.cos(theta), math.sin(theta), 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ]
        )
        # force mu3 orthogonal to both others
        assert abs(mus[2] @ mus[0]) < 1e-12 and abs(mus[2] @ mus[1]) < 1e-12
        p = hardness_distribution(mus, 0.1)
        e = np.exp(np.array([4.5, 4.5, 0.0]))
        assert np.allclose(p, e / e.sum(), atol=1e-9)
        assert p[0] == pytest.approx(0.4972, abs=1e-4)
        assert p[2] == pytest.approx(0.0055, abs=1e-4)

    def test_single_prototype_is_error(self):
        with pytest.raises(DataError):
            hardness_distribution(unit_rows(1, 4, 7), 0.1)

    def test_permutation_equivariant(self):
        mus = unit_rows(5, 6, 8)
        p = hardness_distribution(mus, 0.2)
        perm = np.random.default_rng(9).permutation(5)
        assert np.allclose(hardness_distribution(mus[perm], 0.2), p[perm])

    def test_temperature_limits(self):
        mus = unit_rows(4, 8, 10)
        flat = hardness_distribution(mus, 1e6)
        assert np.abs(flat - 0.25).max() < 1e-3
        sharp = hardness_distribution(mus, 1e-6)
        scores = (mus @ mus.T).sum(axis=1) - 1.0
        winner = scores.argmax()
        assert sharp[winner] == pytest.approx(1.0, abs=1e-3)


class TestSampleReplayFeatures:
    def test_zero_draws(self):
        store = store_with(np.eye(4)[:3])
        z, labels = sample_replay_features(store, 0, substream(0, "replay"))
        assert z.shape == (0, 4) and labels.shape == (0,)

    def test_one_hot_distribution(self):
        store = store_with(np.eye(4)[:3])
        probs = np.array([0.0, 1.0, 0.0])
        _, labels = sample_replay_features(store, 20, substream(1, "replay"), probs=probs)
        assert set(labels.tolist()) == {1}

    def test_zero_radius_returns_exact_prototypes(self):
        protos = unit_rows(3, 5, 11)
        store = store_with(protos, radius=0.0)
        z, labels = sample_replay_features(store, 10, substream(2, "replay"))
        assert np.allclose(z, protos[labels])

    def test_chi_squared_frequencies(self):
        protos = unit_rows(6, 16, 12)
        store = store_with(protos, radius=0.2)
        n = 10**5
        _, labels = sample_replay_features(store, n, substream(42, "replay"))
        counts = np.bincount(labels, minlength=6)
        _, p_value = chisquare(counts, n * store.hardness)
        assert p_value > 0.01


class TestPrototypeReplayLoss:
    def make_model(self, k=2, d=6):
        m = init_model(d, k, HyperParams(d_proj=4), substream(3, "init"))
        m.heads = np.eye(d)[:k].copy()
        return m

    def test_aligned_feature_sharp_softmax(self):
        m = self.make_model()
        z = np.eye(6)[:1]
        lv = prototype_replay_loss(z, [0], m, 0.1)
        e = np.exp([10.0, 0.0])
        assert lv.value == pytest.approx(-math.log(e[0] / e.sum()), rel=1e-6)
        assert lv.value == pytest.approx(4.54e-5, abs=1e-6)

    def test_equidistant_feature(self):
        m = self.make_model()
        z = unit([1.0, 1.0, 0, 0, 0, 0])[None, :]
        assert prototype_replay_loss(z, [1], m, 0.1).value == pytest.approx(math.log(2))

    def test_gradients_reach_heads_only(self):
        m = self.make_model(k=3)
        z = unit_rows(4, 6, 13)
        lv = prototype_replay_loss(z, [0, 1, 2, 0], m, 0.1)
        assert np.any(lv.grads["heads"] != 0)
        assert not np.any(lv.grads["adapter_w"])
        assert not np.any(lv.grads["projection"])

    def test_gradient_matches_finite_differences(self):
        m = self.make_model(k=3)
        m.heads = unit_rows(3, 6, 14)
        z = unit_rows(5, 6, 15)
        labels = np.array([0, 1, 2, 1, 0])

        def loss_fn(params):
            probe = m.copy()
            probe.heads = params["heads"]
            return prototype_replay_loss(z, labels, probe, 0.1)

        report = finite_difference_check(loss_fn, {"heads": m.heads})
        assert report.passed, report.max_rel_error

    def test_label_out_of_range_is_error(self):
        m = self.make_model()
        with pytest.raises(DataError):
            prototype_replay_loss(np.eye(6)[:1], [5], m, 0.1)


class TestKnowledgeDistillation:
    def test_identical_adapters_zero(self):
        m = init_model(5, 2, HyperParams(d_proj=4), substream(4, "init"))
        batch = unit_rows(6, 5, 16)
        assert knowledge_distillation_loss(m, m.copy(), batch).value == pytest.approx(0.0)

    def test_orthogonal_outputs_one(self):
        m = init_model(4, 2, HyperParams(d_proj=4), substream(5, "init"))
        prev = m.copy()
        # swap two coordinates so basis-vector outputs become orthogonal
        prev.adapter_w = np.eye(4)[[1, 0, 3, 2]]
        batch = np.eye(4)
        assert knowledge_distillation_loss(m, prev, batch).value == pytest.approx(1.0)

    def test_antipodal_outputs_two(self):
        m = init_model(4, 2, HyperParams(d_proj=4), substream(6, "init"))
        prev = m.copy()
        prev.adapter_w = -np.eye(4)
        batch = unit_rows(5, 4, 17)
        assert knowledge_distillation_loss(m, prev, batch).value == pytest.approx(2.0)


class TestOldClassObjective:
    def setup_state(self, seed=0, d=6, k=4):
        h = HyperParams(d_proj=4, n_proto=5)
        model = init_model(d, k, h, substream(seed, "init"))
        prev = init_model(d, k, h, substream(seed + 1, "init"))
        prev.adapter_w = prev.adapter_w + 0.1 * np.random.default_rng(seed).standard_normal((d, d))
        store = store_with(unit_rows(k, d, seed + 2), radius=0.15)
        return model, prev, store, h

    def test_lambda2_zero_equals_replay_alone(self):
        model, prev, store, h = self.setup_state()
        batch = unit_rows(6, 6, 18)
        replay = sample_replay_features(store, 5, substream(7, "replay"))
        lv = old_class_objective(
            batch, model, prev, store, h.with_overrides(lambda2=0.0), replay=replay
        )
        direct = prototype_replay_loss(replay[0], replay[1], model, h.tau_p)
        assert lv.value == pytest.approx(direct.value)

    def test_same_model_kills_kd_term(self):
        model, _, store, h = self.setup_state(seed=3)
        batch = unit_rows(6, 6, 19)
        replay = sample_replay_features(store, 5, substream(8, "replay"))
        lv = old_class_objective(batch, model, model.copy(), store, h, replay=replay)
        direct = prototype_replay_loss(replay[0], replay[1], model, h.tau_p)
        assert lv.value == pytest.approx(direct.value)

    def test_gradient_matches_finite_differences(self):
        model, prev, store, h = self.setup_state(seed=5)
        batch = unit_rows(4, 6, 20)
        replay = sample_replay_features(store, 4, substream(9, "replay"))

        def loss_fn(params):
            return old_class_objective(
                batch, ModelState.from_params(params), prev, store, h, replay=replay
            )

        report = finite_difference_check(loss_fn, model.params())
        assert report.passed, report.max_rel_error


class TestStoreSerialization:
    def test_round_trip(self, tmp_path):
        store = store_with(unit_rows(4, 8, 21), radius=0.3, tau_h=0.2)
        store.source_stage[3] = 2
        path = tmp_path / "store.bin"
        store.save(path)
        loaded = PrototypeStore.load(path)
        assert loaded.radius == store.radius
        assert loaded.tau_h == store.tau_h
        assert loaded.classes() == store.classes()
        assert loaded.source_stage == store.source_stage
        assert np.array_equal(loaded.matrix(), store.matrix())
        assert np.array_equal(loaded.hardness, store.hardness)
        assert np.array_equal(loaded.hardness_scores, store.hardness_scores)

    def test_bad_magic_is_error(self, tmp_path):
        path = tmp_path / "store.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(DataError, match="magic"):
            PrototypeStore.load(path)
