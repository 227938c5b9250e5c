"""Spherical k-means, silhouette scoring, and clustering-guided head init.

All distances are cosine: points and centroids live on the unit sphere and
d(x, y) = 1 - x.y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import substream
from .validation import ConfigError, DataError, as_float_matrix, check_unit_rows

__all__ = [
    "ClusteringResult",
    "spherical_kmeans",
    "silhouette_score",
    "estimate_new_class_count",
    "clustering_guided_init",
]

SILHOUETTE_SUBSAMPLE = 5000


@dataclass
class ClusteringResult:
    centroids: np.ndarray  # (K, d) unit rows
    assignments: np.ndarray  # (N,) ints in [0, K)
    inertia: float


def _unit_features(features) -> np.ndarray:
    if hasattr(features, "data"):
        x = features.data
    else:
        x = features
    x = as_float_matrix(x, "features")
    check_unit_rows(x, "features")
    return x


def _plusplus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding on cosine distance.

    Each step draws several candidates with probability proportional to the
    squared distance to the nearest chosen center and keeps the one that
    reduces the total potential the most.
    """
    n = x.shape[0]
    n_candidates = 2 + int(np.log(k)) if k > 1 else 1
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    best_d = np.maximum(1.0 - x @ centers[0], 0.0)
    for j in range(1, k):
        w = best_d * best_d
        total = w.sum()
        if total <= 0:
            picks = rng.integers(n, size=n_candidates)
        else:
            picks = rng.choice(n, size=n_candidates, p=w / total)
        best_pick, best_pot, best_pick_d = -1, np.inf, None
        for idx in picks:
            cand_d = np.minimum(best_d, np.maximum(1.0 - x @ x[int(idx)], 0.0))
            pot = float((cand_d * cand_d).sum())
            if pot < best_pot:
                best_pick, best_pot, best_pick_d = int(idx), pot, cand_d
        centers[j] = x[best_pick]
        best_d = best_pick_d
    return centers


def _normalize_centroid(v: np.ndarray) -> np.ndarray | None:
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return None
    return v / norm


def _kmeans_once(
    x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int
) -> ClusteringResult:
    centers = _plusplus_seed(x, k, rng)
    assignments = np.full(x.shape[0], -1, dtype=np.int64)
    for _ in range(max_iters):
        sims = x @ centers.T
        new_assign = sims.argmax(axis=1)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            members = x[assignments == j]
            mean_dir = None if members.shape[0] == 0 else _normalize_centroid(members.mean(axis=0))
            if mean_dir is None:
                # empty (or degenerate) cluster: reseed at the point farthest
                # from its currently assigned centroid
                assigned_sim = (x * centers[assignments]).sum(axis=1)
                centers[j] = x[int(assigned_sim.argmin())]
            else:
                centers[j] = mean_dir
    sims = x @ centers.T
    assignments = sims.argmax(axis=1)
    inertia = float((1.0 - sims[np.arange(x.shape[0]), assignments]).sum())
    return ClusteringResult(centers, assignments, inertia)


def spherical_kmeans(
    features,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    n_restarts: int = 3,
) -> ClusteringResult:
    """Cosine k-means; returns the best of n_restarts by inertia."""
    x = _unit_features(features)
    n = x.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > n:
        raise DataError(f"k = {k} exceeds the number of points {n}")
    best: ClusteringResult | None = None
    for restart in range(max(1, n_restarts)):
        rng = substream(seed, "kmeans", restart)
        result = _kmeans_once(x, k, rng, max_iters)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def silhouette_score(features, assignments) -> float:
    """Mean silhouette under cosine distance.

    Singleton clusters contribute 0; so do points with a = b = 0.
    """
    x = _unit_features(features)
    labels = np.asarray(assignments)
    if labels.shape != (x.shape[0],):
        raise DataError("assignments must be one id per point")
    ids = np.unique(labels)
    if ids.size < 2:
        raise DataError("silhouette needs at least 2 clusters")
    dist = np.maximum(1.0 - x @ x.T, 0.0)
    n = x.shape[0]
    scores = np.zeros(n)
    masks = {c: labels == c for c in ids}
    sizes = {c: int(masks[c].sum()) for c in ids}
    if min(sizes.values()) < 1:
        raise DataError("every cluster needs at least one member")
    for i in range(n):
        own = labels[i]
        if sizes[own] == 1:
            scores[i] = 0.0
            continue
        a = dist[i][masks[own]].sum() / (sizes[own] - 1)
        b = min(dist[i][masks[c]].mean() for c in ids if c != own)
        denom = max(a, b)
        # a = b = 0 (coincident points) scores 0 by convention; the tolerance
        # absorbs rounding in 1 - x.x for identical unit vectors
        scores[i] = 0.0 if denom <= 1e-12 else (b - a) / denom
    return float(scores.mean())


def estimate_new_class_count(
    features,
    k_old: int,
    k_range: tuple[int, int],
    seed: int = 0,
) -> int:
    """Pick k_new in [k_range] maximizing the silhouette of (k_old + k_new)-means.

    Ties break toward the smaller candidate. Above SILHOUETTE_SUBSAMPLE points
    the silhouette is computed on a seeded subsample for O(N^2) cost control.
    """
    x = _unit_features(features)
    lo, hi = k_range
    if lo > hi:
        raise ConfigError(f"empty candidate range [{lo}, {hi}]")
    if lo < 1:
        raise ConfigError("k_new candidates must be >= 1")
    n = x.shape[0]
    for k_new in (lo, hi):
        k_total = k_old + k_new
        if not 2 <= k_total <= n:
            raise DataError(
                f"candidate total K = {k_total} outside [2, {n}] for k_new = {k_new}"
            )
    sub_idx = None
    if n > SILHOUETTE_SUBSAMPLE:
        sub_idx = substream(seed, "silhouette").choice(n, SILHOUETTE_SUBSAMPLE, replace=False)
        sub_idx.sort()
    best_k = None
    best_score = -np.inf
    for k_new in range(lo, hi + 1):
        result = spherical_kmeans(x, k_old + k_new, seed=seed)
        if sub_idx is None:
            score = silhouette_score(x, result.assignments)
        else:
            labels = result.assignments[sub_idx]
            if np.unique(labels).size < 2:
                score = -np.inf
            else:
                score = silhouette_score(x[sub_idx], labels)
        if score > best_score:
            best_score = score
            best_k = k_new
    return int(best_k)


def clustering_guided_init(centroids, old_heads, k_new: int) -> np.ndarray:
    """Select the k_new centroids least similar to the old heads.

    Similarity of a centroid is its maximum cosine to any old head; the
    selected centroids are returned in descending dissimilarity with ties
    broken by centroid index.
    """
    c = as_float_matrix(centroids, "centroids")
    check_unit_rows(c, "centroids")
    heads = as_float_matrix(old_heads, "old_heads")
    check_unit_rows(heads, "old_heads")
    if k_new < 1:
        raise ConfigError("k_new must be >= 1")
    if k_new > c.shape[0]:
        raise DataError(f"k_new = {k_new} exceeds the number of centroids {c.shape[0]}")
    score = -(c @ heads.T).max(axis=1)
    order = np.lexsort((np.arange(c.shape[0]), -score))
    return c[order[:k_new]].copy()
