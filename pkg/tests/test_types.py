import numpy as np
import pytest

from cgcd import FeatureMatrix, HyperParams, LabelSpace, RunModes
from cgcd.validation import ConfigError, DataError


def unit_rows(n, d, seed=0):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestFeatureMatrix:
    def test_accepts_unit_rows(self):
        fm = FeatureMatrix(unit_rows(5, 4))
        assert fm.n == 5 and fm.dim == 4 and fm.labels is None

    def test_rejects_non_unit_rows(self):
        x = unit_rows(5, 4)
        x[2] *= 1.01
        with pytest.raises(DataError, match="unit-norm"):
            FeatureMatrix(x)

    def test_rejects_tiny_dimension(self):
        with pytest.raises(DataError):
            FeatureMatrix(np.ones((3, 1)))

    def test_label_validation(self):
        x = unit_rows(4, 3)
        fm = FeatureMatrix(x, [0, 1, -1, 2])
        assert not fm.is_labeled
        with pytest.raises(DataError):
            FeatureMatrix(x, [0, 1, -2, 2])
        with pytest.raises(DataError):
            FeatureMatrix(x, [0, 1])

    def test_subset_keeps_labels(self):
        fm = FeatureMatrix(unit_rows(6, 3), np.arange(6))
        sub = fm.subset([1, 3])
        assert sub.n == 2
        assert sub.labels.tolist() == [1, 3]


class TestLabelSpace:
    def test_stage0_shape(self):
        ls = LabelSpace(0, 5, 5, 0)
        assert ls.k_total == 5
        assert list(ls.new_ids) == []
        assert list(ls.init_ids) == list(range(5))

    def test_stage0_must_be_consistent(self):
        with pytest.raises(ConfigError):
            LabelSpace(0, 5, 4, 0)

    def test_next_stage_accumulates(self):
        ls = LabelSpace(0, 5, 5, 0).next_stage(3)
        assert (ls.stage_index, ls.k_old, ls.k_new, ls.k_total) == (1, 5, 3, 8)
        ls2 = ls.next_stage(2)
        assert ls2.k_old == ls.k_total  # old at t equals total at t-1

    def test_next_stage_needs_new_classes(self):
        with pytest.raises(ConfigError):
            LabelSpace(0, 5, 5, 0).next_stage(0)


class TestHyperParams:
    def test_defaults_follow_recipe(self):
        h = HyperParams()
        assert (h.tau_p, h.tau_t, h.tau_h) == (0.1, 0.05, 0.1)
        assert (h.lambda1, h.lambda2, h.lambda3) == (1.0, 1.0, 1.0)
        assert h.lambda0 == 0.35
        assert (h.epochs_init, h.epochs_cont, h.batch_size) == (100, 30, 128)
        assert (h.lr_init, h.lr_cont) == (0.1, 0.01)
        assert (h.tau_c_sup, h.tau_c_self) == (0.07, 1.0)

    def test_sharpening_must_be_sharper(self):
        with pytest.raises(ConfigError, match="tau_t"):
            HyperParams(tau_t=0.2, tau_p=0.1)

    def test_temperatures_positive(self):
        with pytest.raises(ConfigError):
            HyperParams(tau_p=0.0)


class TestRunModes:
    def test_gt_ratios_validated(self):
        with pytest.raises(ConfigError):
            RunModes(prior_reg=True, gt_ratios=(0.7, 0.7))

    def test_prior_requires_entropy_path(self):
        with pytest.raises(ConfigError):
            RunModes(prior_reg=True, entropy_reg=False)
