"""Hungarian-matched accuracies and the derived forgetting/bias metrics.

One global permutation between true classes and predicted cluster ids is
computed per stage via optimal assignment on the contingency matrix; all
accuracies are percentages rounded to two decimals at construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .types import LabelSpace
from .validation import DataError

__all__ = [
    "StageEval",
    "hungarian_accuracy",
    "forgetting_metric",
    "discovery_metric",
    "prediction_bias_metrics",
    "hardness_bias_metrics",
]


def _pct(x: float) -> float:
    return round(float(x) * 100.0, 2)


@dataclass
class StageEval:
    """Per-stage accuracies under the matched permutation."""

    stage: int
    acc_all: float
    acc_old: float
    acc_new: float | None
    acc_init: float
    per_class_acc: dict[int, float]
    permutation: dict[int, int]
    old_classes_fixed: bool  # diagnostic: does the matching fix every old class?

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "all": self.acc_all,
            "old": self.acc_old,
            "new": self.acc_new,
            "acc_init": self.acc_init,
            "per_class": {str(c): v for c, v in sorted(self.per_class_acc.items())},
            "permutation": {str(c): p for c, p in sorted(self.permutation.items())},
            "old_classes_fixed": self.old_classes_fixed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageEval":
        return cls(
            stage=int(d["stage"]),
            acc_all=d["all"],
            acc_old=d["old"],
            acc_new=d["new"],
            acc_init=d["acc_init"],
            per_class_acc={int(c): v for c, v in d["per_class"].items()},
            permutation={int(c): int(p) for c, p in d["permutation"].items()},
            old_classes_fixed=bool(d["old_classes_fixed"]),
        )


def hungarian_accuracy(y_true, y_pred, label_space: LabelSpace, strict: bool = True) -> StageEval:
    """All/Old/New/init accuracies under the optimal class permutation.

    strict=False relaxes the coverage requirement for estimated-class-count
    runs: true classes beyond the model's label space pad the contingency and
    simply score zero.
    """
    yt = np.asarray(y_true, dtype=np.int64)
    yp = np.asarray(y_pred, dtype=np.int64)
    if yt.shape != yp.shape or yt.ndim != 1:
        raise DataError(f"label length mismatch: {yt.shape} vs {yp.shape}")
    k = label_space.k_total
    if np.any(yp < 0) or np.any(yp >= k):
        raise DataError(f"predicted id outside [0, {k})")
    if np.any(yt < 0):
        raise DataError("negative true id")
    if strict and np.any(yt >= k):
        raise DataError(f"true id outside [0, {k})")
    k_sq = max(k, int(yt.max()) + 1)
    counts = np.bincount(yt, minlength=k_sq)
    if strict and np.any(counts[:k] == 0):
        missing = int(np.argmax(counts[:k] == 0))
        raise DataError(f"y_true does not cover class {missing}")
    contingency = np.zeros((k_sq, k_sq), dtype=np.int64)
    np.add.at(contingency, (yt, yp), 1)
    rows, cols = linear_sum_assignment(contingency, maximize=True)
    perm = {int(r): int(c) for r, c in zip(rows, cols)}
    matched = np.array([contingency[c, perm[c]] for c in range(k_sq)], dtype=np.float64)
    per_class = {c: _pct(matched[c] / counts[c]) for c in range(k_sq) if counts[c] > 0}

    def group_acc(ids) -> float | None:
        ids = [c for c in ids if counts[c] > 0]
        if not ids:
            return None
        return _pct(matched[ids].sum() / counts[ids].sum())

    return StageEval(
        stage=label_space.stage_index,
        acc_all=_pct(matched.sum() / counts.sum()),
        acc_old=group_acc(range(label_space.k_old)),
        acc_new=group_acc(range(label_space.k_old, k_sq)),
        acc_init=group_acc(label_space.init_ids),
        per_class_acc=per_class,
        permutation=perm,
        old_classes_fixed=all(perm[c] == c for c in label_space.old_ids),
    )


def forgetting_metric(acc_init_sequence) -> float:
    """Maximum drop of initial-class accuracy relative to Stage-0."""
    seq = list(acc_init_sequence)
    if len(seq) == 0:
        raise DataError("empty accuracy sequence")
    if len(seq) < 2:
        raise DataError("forgetting metric needs at least one continual stage")
    base = float(seq[0])
    return round(max(base - float(acc) for acc in seq[1:]), 2)


def discovery_metric(acc_new_per_stage) -> float:
    """Mean new-class accuracy over the continual stages."""
    seq = list(acc_new_per_stage)
    if len(seq) == 0:
        raise DataError("empty accuracy sequence")
    return round(float(np.mean(seq)), 2)


def prediction_bias_metrics(test_probs, y_true, label_space: LabelSpace) -> dict[str, float]:
    """delta_p (old-new marginal gap) and delta_r (new predicted as old), in %."""
    probs = np.asarray(test_probs, dtype=np.float64)
    yt = np.asarray(y_true, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != yt.shape[0]:
        raise DataError("test_probs and y_true must align")
    if probs.shape[1] != label_space.k_total:
        raise DataError("probability width does not match the label space")
    k_old = label_space.k_old
    new_mask = yt >= k_old
    if not np.any(new_mask):
        raise DataError("no new-class samples in the evaluation split")
    marginal = probs.mean(axis=0)
    delta_p = _pct(float(marginal[:k_old].sum() - marginal[k_old:].sum()))
    pred_old = probs[new_mask].argmax(axis=1) < k_old
    delta_r = _pct(float(pred_old.mean()))
    return {"delta_p": delta_p, "delta_r": delta_r}


def hardness_bias_metrics(
    per_class_acc: dict[int, float],
    init_class_ids,
    hardness,
) -> dict[str, float]:
    """Var0 (population variance of init-class accuracies) and Acc_h (hardest)."""
    ids = list(init_class_ids)
    if not ids:
        raise DataError("no initial classes")
    missing = [c for c in ids if c not in per_class_acc]
    if missing:
        raise DataError(f"missing per-class accuracy for class {missing[0]}")
    h = np.asarray(hardness, dtype=np.float64)
    if h.shape[0] < len(ids):
        raise DataError("hardness vector shorter than the initial class set")
    accs = np.array([per_class_acc[c] for c in ids], dtype=np.float64)
    # ties in hardness break toward the smaller class index
    hardest = ids[int(np.argmax(h[ids]))]
    return {
        "var0": round(float(accs.var()), 2),
        "acc_h": per_class_acc[hardest],
    }
