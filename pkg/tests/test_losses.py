import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgcd import (
    LossValue,
    ScheduleState,
    cross_entropy,
    finite_difference_check,
    self_supervised_contrastive_loss,
    sgd_step,
    supervised_contrastive_loss,
)
from cgcd.validation import ConfigError, DataError


def unit_rows(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def simplex(rng, k):
    p = rng.random(k) + 1e-3
    return p / p.sum()


class TestCrossEntropy:
    def test_one_hot_half(self):
        target = np.array([1.0, 0.0, 0.0])
        pred = np.array([0.5, 0.25, 0.25])
        assert cross_entropy(target, pred) == pytest.approx(math.log(2))

    def test_self_entropy_of_uniform(self):
        for k in (2, 5, 9):
            u = np.full(k, 1.0 / k)
            assert cross_entropy(u, u) == pytest.approx(math.log(k))

    def test_matches_direct_arithmetic(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t, p = simplex(rng, 6), simplex(rng, 6)
            assert cross_entropy(t, p) == pytest.approx(-(t * np.log(p)).sum())

    def test_zero_target_side_is_ignored(self):
        target = np.array([1.0, 0.0])
        pred = np.array([1.0, 0.0])
        assert cross_entropy(target, pred) == 0.0

    def test_log_of_zero_is_error(self):
        with pytest.raises(DataError, match="log of zero"):
            cross_entropy(np.array([0.5, 0.5]), np.array([1.0, 0.0]))

    @given(st.integers(0, 10000))
    @settings(max_examples=30, deadline=None)
    def test_gibbs_inequality(self, seed):
        rng = np.random.default_rng(seed)
        q, p = simplex(rng, 5), simplex(rng, 5)
        assert cross_entropy(q, p) >= cross_entropy(q, q) - 1e-12


def sup_contrastive_oracle(h1, h2, labels, tau):
    """Direct per-anchor summation of the written formula."""
    n = h1.shape[0]
    total = 0.0
    for i in range(n):
        pos = [q for q in range(n) if labels[q] == labels[i] and q != i]
        if not pos:
            continue
        den = sum(math.exp(h1[i] @ h2[m] / tau) for m in range(n) if m != i)
        inner = sum(
            math.log(math.exp(h1[i] @ h2[q] / tau) / den) for q in pos
        ) / len(pos)
        total += inner
    return -total / n


def self_contrastive_oracle(h1, h2, tau):
    n = h1.shape[0]
    total = 0.0
    for i in range(n):
        den = sum(math.exp(h1[i] @ h2[m] / tau) for m in range(n) if m != i)
        total += math.log(math.exp(h1[i] @ h2[i] / tau) / den)
    return -total / n


class TestSupervisedContrastive:
    def test_equal_similarities_give_zero(self):
        # both samples share a label; each anchor sees its positive at the
        # same similarity as its only other-view negative
        h1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        h2 = np.array([[1.0, 1.0], [1.0, 1.0]]) / np.sqrt(2)
        lv = supervised_contrastive_loss(h1, h2, [0, 0], 0.5)
        assert lv.value == pytest.approx(0.0, abs=1e-12)

    def test_all_anchors_skipped_warns_and_returns_zero(self, caplog):
        h1 = unit_rows(2, 3, 1)
        h2 = unit_rows(2, 3, 2)
        with caplog.at_level(logging.WARNING):
            lv = supervised_contrastive_loss(h1, h2, [0, 1], 0.2)
        assert lv.value == 0.0
        assert any("empty positive set" in r.message for r in caplog.records)

    def test_matches_direct_summation_oracle(self):
        h1 = unit_rows(4, 5, 3)
        h2 = unit_rows(4, 5, 4)
        labels = np.array([0, 1, 0, 1])
        lv = supervised_contrastive_loss(h1, h2, labels, 0.07)
        assert lv.value == pytest.approx(sup_contrastive_oracle(h1, h2, labels, 0.07), rel=1e-10)

    def test_gradients_match_finite_differences(self):
        h1 = unit_rows(4, 3, 5)
        h2 = unit_rows(4, 3, 6)
        labels = np.array([0, 0, 1, 1])

        def loss_fn(params):
            return supervised_contrastive_loss(params["view1"], params["view2"], labels, 0.3)

        report = finite_difference_check(loss_fn, {"view1": h1, "view2": h2})
        assert report.passed, report.max_rel_error


class TestSelfSupervisedContrastive:
    def test_numerator_equals_denominator_gives_zero(self):
        h1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        h2 = np.array([[np.sqrt(0.5), np.sqrt(0.5)], [np.sqrt(0.5), np.sqrt(0.5)]])
        lv = self_supervised_contrastive_loss(h1, h2, 1.0)
        assert lv.value == pytest.approx(0.0, abs=1e-12)

    def test_similarity_gap_of_tau_gives_minus_one(self):
        # h_i . h'_i = s and h_i . h'_j = s - tau for the single negative
        tau = 0.25
        s = 0.6
        gram = np.array([[s, s - tau], [s - tau, s]])
        h1 = np.eye(2, 3)  # orthonormal anchors
        h2 = np.zeros((2, 3))
        h2[:, 0] = gram[0]  # h1[0] . h2[j] = gram[0, j]
        h2[:, 1] = gram[1]  # h1[1] . h2[j] = gram[1, j]
        h2[:, 2] = np.sqrt(1 - (h2[:, 0] ** 2 + h2[:, 1] ** 2))
        lv = self_supervised_contrastive_loss(h1, h2, tau)
        assert lv.value == pytest.approx(-1.0, abs=1e-10)

    def test_matches_direct_summation_oracle(self):
        h1 = unit_rows(5, 4, 7)
        h2 = unit_rows(5, 4, 8)
        lv = self_supervised_contrastive_loss(h1, h2, 1.0)
        assert lv.value == pytest.approx(self_contrastive_oracle(h1, h2, 1.0), rel=1e-10)

    def test_no_negatives_is_error(self):
        h = unit_rows(1, 4, 9)
        with pytest.raises(DataError, match="no negatives"):
            self_supervised_contrastive_loss(h, h, 1.0)


class TestSgdStep:
    def test_cosine_schedule_endpoints(self):
        assert ScheduleState(0.1, 10, 0).lr() == pytest.approx(0.1)
        assert ScheduleState(0.1, 10, 10).lr() == pytest.approx(0.0)
        assert ScheduleState(0.1, 10, 5).lr() == pytest.approx(0.05)

    def test_zero_lr_is_identity(self):
        params = {"w": np.arange(4.0)}
        grads = {"w": np.ones(4)}
        out = sgd_step(params, grads, ScheduleState(0.1, 3, 3))
        assert np.array_equal(out["w"], params["w"])

    def test_step_applies_lr(self):
        params = {"w": np.zeros(3)}
        grads = {"w": np.ones(3)}
        out = sgd_step(params, grads, ScheduleState(1.0, 2, 1))
        assert np.allclose(out["w"], -0.5)

    def test_shape_mismatch_is_error(self):
        with pytest.raises(DataError):
            sgd_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, ScheduleState(0.1, 2, 0))


class TestFiniteDifferenceCheck:
    def test_quadratic_is_exact(self):
        def loss_fn(params):
            p = params["p"]
            return LossValue(0.5 * float((p * p).sum()), {"p": p.copy()})

        report = finite_difference_check(loss_fn, {"p": np.array([1.0, -2.0, 3.0])})
        assert report.passed
        assert report.max_rel_error < 1e-9
        assert report.n_coordinates == 3

    def test_wrong_gradient_fails(self):
        def loss_fn(params):
            p = params["p"]
            return LossValue(0.5 * float((p * p).sum()), {"p": 2.0 * p})

        report = finite_difference_check(loss_fn, {"p": np.array([1.0, 2.0])})
        assert not report.passed

    def test_non_finite_loss_is_error(self):
        def loss_fn(params):
            return LossValue(float(np.log(params["p"][0])), {"p": params["p"]})

        with pytest.raises(ValueError):
            finite_difference_check(loss_fn, {"p": np.array([-1.0])})
