"""Loss primitives with analytic gradients, the optimizer, and grad checking.

The contrastive losses follow the written form exactly: the denominator sums
exp(h_i . h'_n / tau) over n != i, so an anchor's own second-view pair never
appears in its denominator and per-anchor terms may be negative.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .validation import ConfigError, DataError, check_probability_vector

logger = logging.getLogger(__name__)

__all__ = [
    "LossValue",
    "ScheduleState",
    "cross_entropy",
    "supervised_contrastive_loss",
    "self_supervised_contrastive_loss",
    "sgd_step",
    "finite_difference_check",
    "GradCheckReport",
]


@dataclass
class LossValue:
    """Scalar loss plus gradients keyed by parameter-block name."""

    value: float
    grads: dict[str, np.ndarray]

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"loss value is not finite: {self.value}")


@dataclass
class ScheduleState:
    """Cosine-annealed learning-rate schedule position."""

    base_lr: float
    total_epochs: int
    current_epoch: int = 0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not 0 <= self.current_epoch <= self.total_epochs:
            raise ConfigError("current_epoch must lie in [0, total_epochs]")

    def lr(self) -> float:
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * self.current_epoch / self.total_epochs))


def cross_entropy(target, pred) -> float:
    """-sum(target * log pred) with the 0*log(0) = 0 convention on the target."""
    t = check_probability_vector(target, "target")
    p = check_probability_vector(pred, "pred")
    if t.shape != p.shape:
        raise DataError(f"shape mismatch: {t.shape} vs {p.shape}")
    active = t > 0
    if np.any(p[active] == 0):
        raise DataError("log of zero: pred has a zero entry where target is nonzero")
    return float(-(t[active] * np.log(p[active])).sum())


def ce_rows(targets: np.ndarray, probs: Node) -> Node:
    """Graph node: mean cross-entropy of prob rows against constant targets."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.value.shape:
        raise DataError(f"shape mismatch: targets {t.shape} vs probs {probs.value.shape}")
    n = t.shape[0]
    return ad.nsum(ad.constant(t) * ad.log(probs)) * (-1.0 / n)


def _similarity_terms(h1: Node, h2: Node, tau: float) -> tuple[Node, Node, np.ndarray]:
    """Shared pieces of both contrastive forms.

    Returns (shifted logits A, per-anchor log of the off-diagonal denominator,
    row shift used for stability).
    """
    n = h1.value.shape[0]
    s = ad.matmul(h1, ad.transpose(h2)) * (1.0 / tau)
    shift = s.value.max(axis=1, keepdims=True)  # constant; cancels exactly
    a = s - ad.constant(shift)
    e = ad.exp(a)
    off_diag = 1.0 - np.eye(n)
    den = ad.nsum(e * ad.constant(off_diag), axis=1)
    return a, ad.log(den), shift


def sup_contrastive_node(h1: Node, h2: Node, labels: np.ndarray, tau: float) -> Node:
    """Supervised contrastive term over two projected views (graph node).

    Anchors whose positive set is empty are skipped with a logged warning.
    """
    labels = np.asarray(labels)
    n = h1.value.shape[0]
    if h2.value.shape[0] != n:
        raise DataError("views must have the same batch size")
    if labels.shape != (n,):
        raise DataError(f"labels must have shape ({n},)")
    if not tau > 0:
        raise ConfigError("tau_c must be > 0")
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    counts = pos.sum(axis=1)
    skipped = int((counts == 0).sum())
    if skipped:
        logger.warning(
            "supervised contrastive: skipped %d anchor(s) with empty positive set", skipped
        )
    weights = np.zeros((n, n))
    active = counts > 0
    weights[active] = pos[active] / counts[active, None]
    a, log_den, _ = _similarity_terms(h1, h2, tau)
    pos_part = ad.nsum(ad.constant(weights) * a)
    den_part = ad.nsum(ad.constant(active.astype(np.float64)) * log_den)
    return (pos_part - den_part) * (-1.0 / n)


def self_contrastive_node(h1: Node, h2: Node, tau: float) -> Node:
    """Self-supervised contrastive term over two projected views (graph node)."""
    n = h1.value.shape[0]
    if h2.value.shape[0] != n:
        raise DataError("views must have the same batch size")
    if n < 2:
        raise DataError("no negatives: self-supervised contrastive needs a batch of >= 2")
    if not tau > 0:
        raise ConfigError("tau_c must be > 0")
    a, log_den, _ = _similarity_terms(h1, h2, tau)
    diag = ad.nsum(ad.constant(np.eye(n)) * a)
    return (diag - ad.nsum(log_den)) * (-1.0 / n)


def _loss_over_views(build, h1_arr, h2_arr) -> LossValue:
    h1 = ad.leaf(np.asarray(h1_arr, dtype=np.float64))
    h2 = ad.leaf(np.asarray(h2_arr, dtype=np.float64))
    loss = build(h1, h2)
    ad.backward(loss)
    return LossValue(
        loss.item(),
        {
            "view1": np.zeros_like(h1.value) if h1.grad is None else h1.grad,
            "view2": np.zeros_like(h2.value) if h2.grad is None else h2.grad,
        },
    )


def supervised_contrastive_loss(projections, projections2, labels, tau_c: float) -> LossValue:
    """Supervised contrastive loss over two views; grads w.r.t. both views."""
    return _loss_over_views(
        lambda a, b: sup_contrastive_node(a, b, labels, tau_c), projections, projections2
    )


def self_supervised_contrastive_loss(projections, projections2, tau_c: float) -> LossValue:
    """Self-supervised contrastive loss over two views; grads w.r.t. both views."""
    return _loss_over_views(
        lambda a, b: self_contrastive_node(a, b, tau_c), projections, projections2
    )


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    schedule: ScheduleState,
) -> dict[str, np.ndarray]:
    """params - lr(epoch) * grads, with the cosine-annealed learning rate."""
    lr = schedule.lr()
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p.copy()
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        out[name] = p - lr * g
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_coordinates: int


def finite_difference_check(
    loss_fn,
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare loss_fn's analytic gradients against central differences.

    loss_fn(params) must return a LossValue and be a pure, deterministic
    function of the parameter arrays.
    """
    if not h > 0:
        raise ConfigError("h must be > 0")
    base = loss_fn(params)
    if not math.isfinite(base.value):
        raise ValueError("loss is not finite at the supplied parameters")
    max_rel = 0.0
    n_coords = 0
    for name, p in params.items():
        if name not in base.grads:
            continue
        analytic = np.asarray(base.grads[name], dtype=np.float64)
        if analytic.shape != p.shape:
            raise DataError(f"gradient shape {analytic.shape} does not match {name} {p.shape}")
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            work = {k: v.copy() for k, v in params.items()}
            wflat = work[name].reshape(-1)
            wflat[i] = orig + h
            f_plus = loss_fn(work).value
            wflat[i] = orig - h
            f_minus = loss_fn(work).value
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError("loss is not finite during finite differencing")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
            n_coords += 1
    return GradCheckReport(max_rel_error=max_rel, passed=max_rel <= tolerance, n_coordinates=n_coords)
