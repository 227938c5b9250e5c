"""Core domain types: feature matrices, label spaces, hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .validation import (
    ConfigError,
    DataError,
    as_float_matrix,
    check_labels,
    check_positive,
    check_non_negative,
    check_unit_rows,
)

__all__ = ["FeatureMatrix", "LabelSpace", "HyperParams", "RunModes"]


@dataclass
class FeatureMatrix:
    """N x d_in table of unit-norm embeddings with optional integer labels.

    Labels use -1 for unlabeled samples; class_names maps class id to a
    display name.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    class_names: dict[int, str] | None = None

    def __post_init__(self):
        self.data = as_float_matrix(self.data, "features")
        n, d = self.data.shape
        if n < 1:
            raise DataError("feature matrix needs at least one row")
        if d < 2:
            raise DataError(f"feature dimension must be >= 2, got {d}")
        check_unit_rows(self.data, "features")
        if self.labels is not None:
            self.labels = check_labels(self.labels, n)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None and bool(np.all(self.labels >= 0))

    def subset(self, idx) -> "FeatureMatrix":
        labels = None if self.labels is None else self.labels[idx]
        return FeatureMatrix(self.data[idx], labels, self.class_names)


@dataclass(frozen=True)
class LabelSpace:
    """Which class ids are "old" vs "new" at a given stage.

    Ids 0..k_old-1 are old, k_old..k_total-1 are new. At stage 0 the initial
    labeled classes count as old and there are no new ones.
    """

    stage_index: int
    k_init: int
    k_old: int
    k_new: int

    def __post_init__(self):
        if self.k_init < 1:
            raise ConfigError("k_init must be >= 1")
        if self.k_old < 0 or self.k_new < 0:
            raise ConfigError("class counts must be non-negative")
        if self.stage_index == 0 and (self.k_old != self.k_init or self.k_new != 0):
            raise ConfigError("stage 0 must have k_old == k_init and k_new == 0")

    @property
    def k_total(self) -> int:
        return self.k_old + self.k_new

    @property
    def old_ids(self) -> range:
        return range(0, self.k_old)

    @property
    def new_ids(self) -> range:
        return range(self.k_old, self.k_total)

    @property
    def init_ids(self) -> range:
        return range(0, self.k_init)

    def next_stage(self, k_new: int) -> "LabelSpace":
        if k_new < 1:
            raise ConfigError("a continual stage needs k_new >= 1")
        return LabelSpace(
            stage_index=self.stage_index + 1,
            k_init=self.k_init,
            k_old=self.k_total,
            k_new=k_new,
        )


@dataclass(frozen=True)
class HyperParams:
    """Training hyperparameters; defaults follow the reference recipe."""

    tau_p: float = 0.1
    tau_t: float = 0.05
    tau_c_sup: float = 0.07
    tau_c_self: float = 1.0
    tau_h: float = 0.1
    lambda0: float = 0.35
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lr_init: float = 0.1
    lr_cont: float = 0.01
    epochs_init: int = 100
    epochs_cont: int = 30
    batch_size: int = 128
    sigma_aug: float = 0.05
    n_proto: int = 128
    d_proj: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("tau_p", "tau_t", "tau_c_sup", "tau_c_self", "tau_h"):
            check_positive(getattr(self, name), name)
        if not self.tau_t < self.tau_p:
            raise ConfigError(
                f"tau_t must be < tau_p (sharpened targets), got {self.tau_t} >= {self.tau_p}"
            )
        check_non_negative(self.sigma_aug, "sigma_aug")
        check_non_negative(self.n_proto, "n_proto")
        for name in ("lr_init", "lr_cont"):
            check_non_negative(getattr(self, name), name)
        for name in ("epochs_init", "epochs_cont", "batch_size", "d_proj"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def with_overrides(self, **kwargs) -> "HyperParams":
        return replace(self, **kwargs)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass(frozen=True)
class RunModes:
    """Feature switches for experiments and ablations.

    entropy_reg toggles the debiased-discovery additions as a bundle: the
    group-wise soft entropy regularization and the clustering-guided head
    initialization (off = random new heads, no regularizer). gt_ratios only
    applies when prior_reg is on; None means derive the true old/new sample
    ratio from the stage plan.
    """

    estimate_k: bool = False
    entropy_reg: bool = True
    hardness_sampling: bool = True
    replay: bool = True
    knowledge_distillation: bool = True
    prior_reg: bool = False
    gt_ratios: tuple[float, float] | None = None
    estimate_k_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.gt_ratios is not None:
            p_old, p_new = self.gt_ratios
            if abs(p_old + p_new - 1.0) > 1e-9 or p_old < 0 or p_new < 0:
                raise ConfigError("gt_ratios must be non-negative and sum to 1")
        if self.prior_reg and not self.entropy_reg:
            raise ConfigError("prior_reg replaces the inter-group term; enable entropy_reg")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))
