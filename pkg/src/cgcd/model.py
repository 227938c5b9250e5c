"""Model state and the forward path from raw embedding to class probabilities.

The encoder stand-in is a trainable affine adapter over fixed ingested
embeddings (initialized to identity so training starts at the backbone
features), followed by a weight-normalized prototype classifier and a
normalized linear projection head for contrastive learning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateVectorError, Node
from .validation import ConfigError, DataError, as_float_matrix
from .types import HyperParams

__all__ = ["ModelState", "ModelGraph", "adapt", "classify", "project", "init_model"]

PARAM_BLOCKS = ("adapter_w", "adapter_b", "projection", "heads")


@dataclass
class ModelState:
    """Adapter + projection + k weight-normalized classifier heads.

    Head rows are stored unnormalized and normalized in the forward pass;
    rows 0..k_old-1 are carried over byte-identical between stages.
    """

    adapter_w: np.ndarray  # (d, d_in)
    adapter_b: np.ndarray  # (d,)
    projection: np.ndarray  # (d_proj, d)
    heads: np.ndarray  # (k, d)
    stage_index: int = 0

    @property
    def d_in(self) -> int:
        return self.adapter_w.shape[1]

    @property
    def d(self) -> int:
        return self.adapter_w.shape[0]

    @property
    def d_proj(self) -> int:
        return self.projection.shape[0]

    @property
    def k(self) -> int:
        return self.heads.shape[0]

    def copy(self) -> "ModelState":
        return ModelState(
            self.adapter_w.copy(),
            self.adapter_b.copy(),
            self.projection.copy(),
            self.heads.copy(),
            self.stage_index,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "adapter_w": self.adapter_w,
            "adapter_b": self.adapter_b,
            "projection": self.projection,
            "heads": self.heads,
        }

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray], stage_index: int = 0) -> "ModelState":
        return cls(
            np.asarray(params["adapter_w"], dtype=np.float64),
            np.asarray(params["adapter_b"], dtype=np.float64),
            np.asarray(params["projection"], dtype=np.float64),
            np.asarray(params["heads"], dtype=np.float64),
            stage_index,
        )


def init_model(d_in: int, k_init: int, hyper: HyperParams, rng: np.random.Generator) -> ModelState:
    """Identity adapter, seeded Gaussian projection and heads."""
    if d_in < 2:
        raise ConfigError(f"d_in must be >= 2, got {d_in}")
    if k_init < 1:
        raise ConfigError("k_init must be >= 1")
    adapter_w = np.eye(d_in, dtype=np.float64)
    adapter_b = np.zeros(d_in, dtype=np.float64)
    projection = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(hyper.d_proj, d_in))
    heads = rng.normal(0.0, 1.0, size=(k_init, d_in))
    return ModelState(adapter_w, adapter_b, projection, heads, stage_index=0)


def _rows(x, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    return as_float_matrix(arr, name), single


def adapt(model: ModelState, u) -> np.ndarray:
    """normalize(W u + b); accepts a single vector or a batch of rows."""
    rows, single = _rows(u, "u")
    if rows.shape[1] != model.d_in:
        raise DataError(f"expected input dim {model.d_in}, got {rows.shape[1]}")
    z = rows @ model.adapter_w.T + model.adapter_b
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateVectorError("degenerate adapter output")
    z = z / norms
    return z[0] if single else z


def project(model: ModelState, z) -> np.ndarray:
    """normalize(P z) into the contrastive projection space."""
    rows, single = _rows(z, "z")
    if rows.shape[1] != model.d:
        raise DataError(f"expected feature dim {model.d}, got {rows.shape[1]}")
    h = rows @ model.projection.T
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateVectorError("degenerate projection output")
    h = h / norms
    return h[0] if single else h


def classify(model: ModelState, z, tau: float) -> np.ndarray:
    """Softmax over cosine logits against the normalized heads."""
    if model.k == 0:
        raise ConfigError("model has no classifier heads")
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    rows, single = _rows(z, "z")
    if rows.shape[1] != model.d:
        raise DataError(f"expected feature dim {model.d}, got {rows.shape[1]}")
    head_norms = np.linalg.norm(model.heads, axis=1, keepdims=True)
    if np.any(head_norms < 1e-12):
        raise DegenerateVectorError("degenerate classifier head")
    logits = rows @ (model.heads / head_norms).T / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def predict_labels(model: ModelState, u) -> np.ndarray:
    """Hard class predictions for raw embeddings (argmax over cosine logits)."""
    z = adapt(model, np.atleast_2d(np.asarray(u, dtype=np.float64)))
    head_norms = np.linalg.norm(model.heads, axis=1, keepdims=True)
    logits = z @ (model.heads / head_norms).T
    return logits.argmax(axis=1)


class ModelGraph:
    """Autodiff view of a ModelState: parameter leaves + forward builders."""

    def __init__(self, model: ModelState):
        self.model = model
        self.adapter_w = ad.leaf(model.adapter_w)
        self.adapter_b = ad.leaf(model.adapter_b)
        self.projection = ad.leaf(model.projection)
        self.heads = ad.leaf(model.heads)

    def adapt(self, u: np.ndarray) -> Node:
        rows = as_float_matrix(u, "u")
        z = ad.matmul(ad.constant(rows), ad.transpose(self.adapter_w)) + self.adapter_b
        return ad.normalize_rows(z)

    def project(self, z: Node) -> Node:
        return ad.normalize_rows(ad.matmul(z, ad.transpose(self.projection)))

    def classify(self, z: Node, tau: float) -> Node:
        heads_n = ad.normalize_rows(self.heads)
        logits = ad.matmul(z, ad.transpose(heads_n)) * (1.0 / tau)
        return ad.softmax_rows(logits)

    def classify_features(self, z_const: np.ndarray, tau: float) -> Node:
        """Classify fixed features (no gradient to the adapter)."""
        return self.classify(ad.constant(as_float_matrix(z_const, "z")), tau)

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name in PARAM_BLOCKS:
            node = getattr(self, name)
            out[name] = (
                np.zeros_like(node.value) if node.grad is None else np.asarray(node.grad)
            )
        return out
