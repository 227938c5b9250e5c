"""Forgetting mitigation: class prototypes with a shared Gaussian radius,
hardness-aware replay sampling, and feature-space knowledge distillation.

Replayed features are sampled directly in adapter-output space, so their
gradients reach the classifier heads only; distillation handles adapter drift.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .losses import LossValue, ce_rows
from .model import ModelGraph, ModelState, adapt
from .types import HyperParams
from .validation import ConfigError, DataError, as_float_matrix, check_unit_rows

logger = logging.getLogger(__name__)

__all__ = [
    "PrototypeStore",
    "estimate_prototypes",
    "shared_radius",
    "hardness_distribution",
    "sample_replay_features",
    "prototype_replay_loss",
    "knowledge_distillation_loss",
    "old_class_objective",
]

_STORE_MAGIC = b"CGPS"
_STORE_VERSION = 1


@dataclass
class PrototypeStore:
    """Per-class unit mean directions, shared radius, hardness distribution."""

    prototypes: dict[int, np.ndarray] = field(default_factory=dict)
    radius: float = 0.0
    tau_h: float = 0.1
    hardness_scores: np.ndarray | None = None  # mean cosine to the other prototypes
    hardness: np.ndarray | None = None  # sampling distribution over classes()
    source_stage: dict[int, int] = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def matrix(self) -> np.ndarray:
        return np.stack([self.prototypes[c] for c in self.classes()])

    def add(self, class_id: int, mu: np.ndarray, stage: int) -> None:
        mu = np.asarray(mu, dtype=np.float64)
        if class_id in self.prototypes:
            raise DataError(f"class {class_id} already has a prototype")
        self.prototypes[int(class_id)] = mu
        self.source_stage[int(class_id)] = int(stage)

    def recompute_hardness(self) -> None:
        protos = self.matrix()
        if protos.shape[0] < 2:
            raise DataError("hardness needs at least 2 prototypes")
        self.hardness_scores = _hardness_scores(protos)
        self.hardness = _softmax(self.hardness_scores / self.tau_h)

    def copy(self) -> "PrototypeStore":
        return PrototypeStore(
            {c: v.copy() for c, v in self.prototypes.items()},
            self.radius,
            self.tau_h,
            None if self.hardness_scores is None else self.hardness_scores.copy(),
            None if self.hardness is None else self.hardness.copy(),
            dict(self.source_stage),
        )

    def to_bytes(self) -> bytes:
        ids = self.classes()
        d = self.prototypes[ids[0]].shape[0] if ids else 0
        buf = io.BytesIO()
        buf.write(_STORE_MAGIC)
        buf.write(struct.pack("<IIIdd", _STORE_VERSION, len(ids), d, self.radius, self.tau_h))
        for c in ids:
            buf.write(struct.pack("<ii", c, self.source_stage[c]))
            buf.write(self.prototypes[c].astype("<f8").tobytes())
        has_hardness = self.hardness is not None
        buf.write(struct.pack("<B", int(has_hardness)))
        if has_hardness:
            buf.write(self.hardness_scores.astype("<f8").tobytes())
            buf.write(self.hardness.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PrototypeStore":
        buf = io.BytesIO(raw)
        magic = buf.read(4)
        if magic != _STORE_MAGIC:
            raise DataError(f"bad prototype store magic {magic!r}")
        version, count, d, radius, tau_h = struct.unpack("<IIIdd", buf.read(28))
        if version != _STORE_VERSION:
            raise DataError(f"unsupported prototype store version {version}")
        store = cls(radius=radius, tau_h=tau_h)
        for _ in range(count):
            c, stage = struct.unpack("<ii", buf.read(8))
            mu = np.frombuffer(buf.read(8 * d), dtype="<f8").copy()
            store.add(c, mu, stage)
        (has_hardness,) = struct.unpack("<B", buf.read(1))
        if has_hardness:
            store.hardness_scores = np.frombuffer(buf.read(8 * count), dtype="<f8").copy()
            store.hardness = np.frombuffer(buf.read(8 * count), dtype="<f8").copy()
        return store

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PrototypeStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def estimate_prototypes(
    features,
    class_ids,
    target_classes,
    fallback_heads: np.ndarray | None = None,
) -> dict[int, np.ndarray]:
    """Normalized per-class feature means for the target classes.

    Classes without members (or whose members cancel out) fall back to the
    class's normalized head vector, with a logged warning.
    """
    z = as_float_matrix(features, "features")
    ids = np.asarray(class_ids)
    if ids.shape != (z.shape[0],):
        raise DataError("class_ids must assign one id per feature row")
    out: dict[int, np.ndarray] = {}
    for c in target_classes:
        c = int(c)
        if fallback_heads is not None and c >= fallback_heads.shape[0]:
            raise DataError(f"target class {c} outside the label space")
        members = z[ids == c]
        mu = None
        if members.shape[0] > 0:
            raw = members.mean(axis=0)
            norm = np.linalg.norm(raw)
            if norm >= 1e-12:
                mu = raw / norm
        if mu is None:
            if fallback_heads is None:
                raise DataError(f"class {c} has no members and no fallback heads were given")
            logger.warning("prototype for class %d fell back to its classifier head", c)
            head = fallback_heads[c]
            mu = head / np.linalg.norm(head)
        out[c] = mu
    return out


def shared_radius(features, labels, k_init: int) -> float:
    """sqrt of the class-averaged covariance trace over the feature dimension."""
    z = as_float_matrix(features, "features")
    ids = np.asarray(labels)
    if ids.shape != (z.shape[0],):
        raise DataError("labels must assign one id per feature row")
    d = z.shape[1]
    total = 0.0
    for c in range(k_init):
        members = z[ids == c]
        if members.shape[0] == 0:
            raise DataError(f"class {c} has no members; cannot estimate the shared radius")
        mu = members.mean(axis=0)
        total += float(((members - mu) ** 2).sum() / members.shape[0])
    return float(np.sqrt(total / (k_init * d)))


def _hardness_scores(protos: np.ndarray) -> np.ndarray:
    k = protos.shape[0]
    norms = np.linalg.norm(protos, axis=1)
    cos = (protos / norms[:, None]) @ (protos / norms[:, None]).T
    return (cos.sum(axis=1) - 1.0) / (k - 1)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def hardness_distribution(prototypes, tau_h: float) -> np.ndarray:
    """softmax over the mean pairwise cosine of each prototype to the others."""
    protos = as_float_matrix(prototypes, "prototypes")
    if protos.shape[0] < 2:
        raise DataError("hardness needs at least 2 prototypes")
    if not tau_h > 0:
        raise ConfigError("tau_h must be > 0")
    return _softmax(_hardness_scores(protos) / tau_h)


def sample_replay_features(
    store: PrototypeStore,
    n: int,
    rng: np.random.Generator,
    probs: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw classes from the hardness distribution, then Gaussian features.

    Features are renormalized onto the sphere after the draw. ``probs``
    overrides the stored distribution (uniform-sampling ablation).
    """
    if n < 0:
        raise ConfigError("n must be >= 0")
    ids = np.array(store.classes())
    if ids.size == 0:
        raise DataError("prototype store is empty")
    if probs is None:
        if store.hardness is None:
            raise DataError("store has no hardness distribution; call recompute_hardness")
        probs = store.hardness
    d = store.prototypes[int(ids[0])].shape[0]
    if n == 0:
        return np.empty((0, d)), np.empty(0, dtype=np.int64)
    picks = rng.choice(ids.size, size=n, p=probs)
    mus = store.matrix()[picks]
    z = mus + store.radius * rng.standard_normal((n, d))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DataError("degenerate replay sample")
    return z / norms, ids[picks]


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def replay_loss_node(graph: ModelGraph, z: np.ndarray, labels: np.ndarray, tau_p: float) -> Node:
    """Mean cross-entropy on replayed features; gradients reach heads only."""
    k = graph.model.k
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= k):
        raise DataError("replay label outside the classifier's range")
    probs = graph.classify_features(z, tau_p)
    return ce_rows(_one_hot(labels, k), probs)


def prototype_replay_loss(features, labels, model: ModelState, tau_p: float) -> LossValue:
    graph = ModelGraph(model)
    loss = replay_loss_node(graph, as_float_matrix(features, "features"), labels, tau_p)
    ad.backward(loss)
    return LossValue(loss.item(), graph.grads())


def kd_node(graph: ModelGraph, prev_model: ModelState, batch: np.ndarray) -> Node:
    """Mean (1 - cosine) drift between current and frozen previous adapters."""
    z_prev = adapt(prev_model, batch)  # frozen: plain arrays, no gradient
    z_cur = graph.adapt(batch)
    cos = ad.nsum(z_cur * ad.constant(np.atleast_2d(z_prev)), axis=1)
    return ad.nmean(1.0 - cos)


def knowledge_distillation_loss(model: ModelState, prev_model: ModelState, batch) -> LossValue:
    graph = ModelGraph(model)
    loss = kd_node(graph, prev_model, as_float_matrix(batch, "batch"))
    ad.backward(loss)
    return LossValue(loss.item(), graph.grads())


def old_objective_node(
    graph: ModelGraph,
    prev_model: ModelState,
    hyper: HyperParams,
    batch: np.ndarray,
    replay: tuple[np.ndarray, np.ndarray] | None,
    kd_on: bool = True,
) -> Node:
    """Replay term + weighted distillation term as one graph node."""
    parts = []
    if replay is not None and replay[0].shape[0] > 0:
        parts.append(replay_loss_node(graph, replay[0], replay[1], hyper.tau_p))
    if kd_on:
        parts.append(hyper.lambda2 * kd_node(graph, prev_model, batch))
    if not parts:
        return ad.constant(0.0)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def old_class_objective(
    batch: np.ndarray,
    model: ModelState,
    prev_model: ModelState,
    store: PrototypeStore,
    hyper: HyperParams,
    rng: np.random.Generator | None = None,
    replay: tuple[np.ndarray, np.ndarray] | None = None,
    n_proto: int | None = None,
    kd_on: bool = True,
    sampling_probs: np.ndarray | None = None,
) -> LossValue:
    """Hardness-aware replay + knowledge distillation (LossValue).

    A fixed replay draw may be supplied for gradient checking; otherwise
    n_proto fresh samples are drawn from the store.
    """
    batch = as_float_matrix(batch, "batch")
    if replay is None:
        count = hyper.n_proto if n_proto is None else n_proto
        if count > 0:
            if rng is None:
                raise ConfigError("either replay or rng must be provided")
            replay = sample_replay_features(store, count, rng, probs=sampling_probs)
    graph = ModelGraph(model)
    loss = old_objective_node(graph, prev_model, hyper, batch, replay, kd_on=kd_on)
    ad.backward(loss)
    return LossValue(loss.item(), graph.grads())
