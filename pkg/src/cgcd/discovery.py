"""New-class discovery objective: feature augmentation, self-distillation,
group-wise soft entropy regularization, and the prior-ratio variant.

The regularizers are added to the loss exactly as written: they are negative
entropies, so minimizing them spreads marginal probability evenly across the
old/new split and within each group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .losses import LossValue, ce_rows
from .model import ModelGraph, ModelState, adapt, classify
from .types import HyperParams, LabelSpace
from .validation import ConfigError, DataError, as_float_matrix

__all__ = [
    "MarginalDistribution",
    "feature_augment",
    "make_views",
    "sharpened_targets",
    "self_distillation_loss",
    "marginal_distribution",
    "soft_entropy_regularizer",
    "prior_ratio_regularizer",
    "new_class_objective",
]


@dataclass
class MarginalDistribution:
    """Mean prediction over a batch, with old/new group masses.

    k_old marks the split point: ids below it are old, the rest new.
    """

    per_class: np.ndarray
    p_old: float
    p_new: float
    k_old: int

    def __post_init__(self):
        self.per_class = np.asarray(self.per_class, dtype=np.float64)
        if abs(self.per_class.sum() - 1.0) > 1e-9:
            raise DataError("marginal per_class must sum to 1")
        if abs(self.p_old + self.p_new - 1.0) > 1e-9:
            raise DataError("p_old + p_new must equal 1")
        if not 0 <= self.k_old <= self.per_class.shape[0]:
            raise DataError("k_old outside the class range")


def feature_augment(u, sigma_aug: float, rng: np.random.Generator) -> np.ndarray:
    """normalize(u + eps) with eps ~ N(0, sigma^2 I); sigma = 0 is the identity."""
    if sigma_aug < 0:
        raise ConfigError("sigma_aug must be >= 0")
    rows = as_float_matrix(u, "u")
    single = np.asarray(u).ndim == 1
    if sigma_aug == 0:
        out = rows.copy()
    else:
        out = rows + rng.normal(0.0, sigma_aug, size=rows.shape)
        norms = np.linalg.norm(out, axis=1)
        while np.any(norms < 1e-12):  # measure-zero; resample those rows
            bad = norms < 1e-12
            out[bad] = rows[bad] + rng.normal(0.0, sigma_aug, size=(int(bad.sum()), rows.shape[1]))
            norms = np.linalg.norm(out, axis=1)
        out = out / norms[:, None]
    return out[0] if single else out


def make_views(u: np.ndarray, sigma_aug: float, rng: np.random.Generator):
    """Two independent augmented views of the same batch."""
    return feature_augment(u, sigma_aug, rng), feature_augment(u, sigma_aug, rng)


def sharpened_targets(
    model: ModelState, views: tuple[np.ndarray, np.ndarray], tau_t: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-view predictions at the sharper temperature, detached from the graph."""
    u1, u2 = views
    q1 = classify(model, adapt(model, u1), tau_t)
    q2 = classify(model, adapt(model, u2), tau_t)
    return np.atleast_2d(q1), np.atleast_2d(q2)


def self_distill_node(p1: Node, p2: Node, q1: np.ndarray, q2: np.ndarray) -> Node:
    """Symmetric cross-entropy: each view's sharpened targets supervise the other."""
    return (ce_rows(q2, p1) + ce_rows(q1, p2)) * 0.5


def self_distillation_loss(p, p2, q, q2) -> LossValue:
    """Array-level self-distillation; gradients w.r.t. the two prediction batches."""
    p_node = ad.leaf(as_float_matrix(p, "p"))
    p2_node = ad.leaf(as_float_matrix(p2, "p2"))
    q_arr = as_float_matrix(q, "q")
    q2_arr = as_float_matrix(q2, "q2")
    if p_node.value.shape != q2_arr.shape or p2_node.value.shape != q_arr.shape:
        raise DataError("prediction/target shapes do not match")
    loss = self_distill_node(p_node, p2_node, q_arr, q2_arr)
    ad.backward(loss)
    return LossValue(loss.item(), {"p": p_node.grad, "p2": p2_node.grad})


def marginal_distribution(probs, label_space: LabelSpace) -> MarginalDistribution:
    batch = as_float_matrix(probs, "probs")
    if batch.shape[0] < 1:
        raise DataError("empty batch")
    if batch.shape[1] != label_space.k_total:
        raise DataError(
            f"probability width {batch.shape[1]} does not match k_total {label_space.k_total}"
        )
    per_class = batch.mean(axis=0)
    p_old = float(per_class[: label_space.k_old].sum())
    p_new = float(per_class[label_space.k_old :].sum())
    return MarginalDistribution(per_class, p_old, p_new, label_space.k_old)


def _neg_entropy(p: np.ndarray) -> float:
    active = p > 0
    return float((p[active] * np.log(p[active])).sum())


def soft_entropy_regularizer(marginal: MarginalDistribution) -> LossValue:
    """Inter old/new split term plus both renormalized within-group terms.

    0 * log(0) counts as 0, and a group with zero mass contributes nothing.
    Gradients are reported w.r.t. the per-class marginal itself (key
    "per_class"); parameter gradients come from the graph-level builder.
    """
    p = marginal.per_class
    k_old = marginal.k_old
    value = _neg_entropy(np.array([marginal.p_old, marginal.p_new]))
    for group in (p[:k_old], p[k_old:]):
        mass = group.sum()
        if group.size and mass > 0:
            value += _neg_entropy(group / mass)
    if np.all(p > 0) and 0 < k_old < p.shape[0]:
        node = ad.leaf(p)
        loss = entropy_reg_node(node, k_old, p.shape[0])
        ad.backward(loss)
        grads = {"per_class": node.grad}
    else:
        # boundary of the simplex: the value is defined by convention, the
        # gradient is not
        grads = {"per_class": np.zeros_like(p)}
    return LossValue(value, grads)


def prior_ratio_regularizer(
    marginal: MarginalDistribution, gt_old_ratio: float, gt_new_ratio: float
) -> LossValue:
    """Cross-entropy of the old/new marginal masses against known true ratios."""
    if abs(gt_old_ratio + gt_new_ratio - 1.0) > 1e-9:
        raise ConfigError("gt ratios must sum to 1")
    for name, (gt, pm) in {
        "p_old": (gt_old_ratio, marginal.p_old),
        "p_new": (gt_new_ratio, marginal.p_new),
    }.items():
        if gt > 0 and pm == 0:
            raise DataError(f"log of zero: marginal {name} is 0 with nonzero gt weight")
    value = 0.0
    if gt_old_ratio > 0:
        value -= gt_old_ratio * np.log(marginal.p_old)
    if gt_new_ratio > 0:
        value -= gt_new_ratio * np.log(marginal.p_new)
    grads = {
        "p_old": np.array(-gt_old_ratio / marginal.p_old if gt_old_ratio > 0 else 0.0),
        "p_new": np.array(-gt_new_ratio / marginal.p_new if gt_new_ratio > 0 else 0.0),
    }
    return LossValue(float(value), grads)


def _group_mass(pbar: Node, mask: np.ndarray) -> Node:
    return ad.nsum(pbar * ad.constant(mask))


def entropy_reg_node(pbar: Node, k_old: int, k_total: int) -> Node:
    """Graph node for the full group-wise regularizer on a strictly positive marginal."""
    if not 0 <= k_old <= k_total:
        raise ConfigError("k_old must lie within [0, k_total]")
    mask_old = np.zeros(k_total)
    mask_old[:k_old] = 1.0
    mask_new = 1.0 - mask_old
    p_old = _group_mass(pbar, mask_old)
    p_new = _group_mass(pbar, mask_new)
    inter = p_old * ad.log(p_old) + p_new * ad.log(p_new)
    within_old = _within_group_node(pbar, mask_old, p_old)
    within_new = _within_group_node(pbar, mask_new, p_new)
    return inter + within_old + within_new


def prior_reg_node(
    pbar: Node, k_old: int, k_total: int, gt_old: float, gt_new: float
) -> Node:
    """Regularizer with the inter term replaced by the prior cross-entropy."""
    mask_old = np.zeros(k_total)
    mask_old[:k_old] = 1.0
    mask_new = 1.0 - mask_old
    p_old = _group_mass(pbar, mask_old)
    p_new = _group_mass(pbar, mask_new)
    inter = -(gt_old * ad.log(p_old) + gt_new * ad.log(p_new))
    within_old = _within_group_node(pbar, mask_old, p_old)
    within_new = _within_group_node(pbar, mask_new, p_new)
    return inter + within_old + within_new


def _within_group_node(pbar: Node, mask: np.ndarray, mass: Node) -> Node:
    """Negative entropy of the within-group distribution, renormalized to 1."""
    if mask.sum() == 0:
        return ad.constant(0.0)
    ratio = pbar / mass
    return ad.nsum(ad.constant(mask) * (ratio * ad.log(ratio)))


def marginal_node(p1: Node, p2: Node) -> Node:
    """Marginal over both views jointly (views have equal batch size)."""
    return (ad.nmean(p1, axis=0) + ad.nmean(p2, axis=0)) * 0.5


def new_objective_node(
    graph: ModelGraph,
    label_space: LabelSpace,
    hyper: HyperParams,
    views: tuple[np.ndarray, np.ndarray],
    targets: tuple[np.ndarray, np.ndarray],
    entropy_on: bool = True,
    prior: tuple[float, float] | None = None,
) -> tuple[Node, Node, Node]:
    """Eq.-for-new-classes graph: (loss, p1, p2)."""
    u1, u2 = views
    q1, q2 = targets
    z1 = graph.adapt(u1)
    z2 = graph.adapt(u2)
    p1 = graph.classify(z1, hyper.tau_p)
    p2 = graph.classify(z2, hyper.tau_p)
    loss = self_distill_node(p1, p2, q1, q2)
    if entropy_on:
        pbar = marginal_node(p1, p2)
        if prior is None:
            reg = entropy_reg_node(pbar, label_space.k_old, label_space.k_total)
        else:
            reg = prior_reg_node(pbar, label_space.k_old, label_space.k_total, *prior)
        loss = loss + hyper.lambda1 * reg
    return loss, p1, p2


def new_class_objective(
    batch: np.ndarray,
    model: ModelState,
    label_space: LabelSpace,
    hyper: HyperParams,
    rng: np.random.Generator | None = None,
    views: tuple[np.ndarray, np.ndarray] | None = None,
    targets: tuple[np.ndarray, np.ndarray] | None = None,
    entropy_on: bool = True,
    prior: tuple[float, float] | None = None,
) -> LossValue:
    """Self-distillation + weighted soft entropy regularization (LossValue).

    Views and sharpened targets may be supplied explicitly (gradient checking
    needs them fixed); otherwise they are drawn/computed here.
    """
    if label_space.k_new < 1:
        raise ConfigError("new-class objective requires a continual stage (k_new >= 1)")
    if views is None:
        if rng is None:
            raise ConfigError("either views or rng must be provided")
        views = make_views(as_float_matrix(batch, "batch"), hyper.sigma_aug, rng)
    if targets is None:
        targets = sharpened_targets(model, views, hyper.tau_t)
    graph = ModelGraph(model)
    loss, _, _ = new_objective_node(
        graph, label_space, hyper, views, targets, entropy_on=entropy_on, prior=prior
    )
    ad.backward(loss)
    return LossValue(loss.item(), graph.grads())
