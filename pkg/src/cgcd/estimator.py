"""Scikit-learn style front end for the continual discovery engine.

``fit`` runs the supervised initial stage, ``discover`` consumes one
unlabeled continual stage, and predict/predict_proba/score work on any
held-out unit-norm embeddings. Hyperparameters mirror HyperParams/RunModes
so get_params/set_params/clone compose with the wider ecosystem.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .model import adapt, classify, predict_labels
from .pipeline import RunState, train_continual_stage, train_stage0
from .types import FeatureMatrix, HyperParams, RunModes
from .evaluation import hungarian_accuracy

__all__ = ["ContinualCategoryDiscoverer"]


class ContinualCategoryDiscoverer(BaseEstimator):
    """Prototype classifier + adapter trained in supervised-then-discovery stages."""

    def __init__(
        self,
        tau_p: float = 0.1,
        tau_t: float = 0.05,
        tau_c_sup: float = 0.07,
        tau_c_self: float = 1.0,
        tau_h: float = 0.1,
        lambda0: float = 0.35,
        lambda1: float = 1.0,
        lambda2: float = 1.0,
        lambda3: float = 1.0,
        lr_init: float = 0.1,
        lr_cont: float = 0.01,
        epochs_init: int = 100,
        epochs_cont: int = 30,
        batch_size: int = 128,
        sigma_aug: float = 0.05,
        n_proto: int = 128,
        d_proj: int = 128,
        seed: int = 0,
        entropy_reg: bool = True,
        hardness_sampling: bool = True,
        knowledge_distillation: bool = True,
    ):
        self.tau_p = tau_p
        self.tau_t = tau_t
        self.tau_c_sup = tau_c_sup
        self.tau_c_self = tau_c_self
        self.tau_h = tau_h
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.lr_init = lr_init
        self.lr_cont = lr_cont
        self.epochs_init = epochs_init
        self.epochs_cont = epochs_cont
        self.batch_size = batch_size
        self.sigma_aug = sigma_aug
        self.n_proto = n_proto
        self.d_proj = d_proj
        self.seed = seed
        self.entropy_reg = entropy_reg
        self.hardness_sampling = hardness_sampling
        self.knowledge_distillation = knowledge_distillation

    def _hyper(self) -> HyperParams:
        names = set(HyperParams.field_names())
        return HyperParams(**{k: v for k, v in self.get_params().items() if k in names})

    def _modes(self) -> RunModes:
        return RunModes(
            entropy_reg=self.entropy_reg,
            hardness_sampling=self.hardness_sampling,
            knowledge_distillation=self.knowledge_distillation,
        )

    def fit(self, X, y):
        """Supervised initial stage on labeled unit-norm embeddings."""
        data = FeatureMatrix(np.asarray(X), np.asarray(y))
        self.run_state_: RunState = train_stage0(data, self._hyper())
        self.n_features_in_ = data.dim
        self.classes_ = np.arange(self.run_state_.label_space.k_total)
        return self

    def discover(self, X, k_new: int | None = None):
        """One continual stage on unlabeled embeddings.

        k_new=None estimates the count via silhouette-scored clustering.
        """
        self._check_fitted()
        data = FeatureMatrix(np.asarray(X))
        modes = self._modes()
        if k_new is None:
            k_old = self.run_state_.label_space.k_total
            modes = RunModes(
                estimate_k=True,
                estimate_k_range=(1, max(2, k_old // 2)),
                entropy_reg=self.entropy_reg,
                hardness_sampling=self.hardness_sampling,
                knowledge_distillation=self.knowledge_distillation,
            )
            k_new = 1  # placeholder; the estimator overrides it
        train_continual_stage(self.run_state_, data, k_new, self._hyper(), modes)
        self.classes_ = np.arange(self.run_state_.label_space.k_total)
        return self

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return predict_labels(self.run_state_.model, self._validated(X))

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        model = self.run_state_.model
        return classify(model, adapt(model, self._validated(X)), self.tau_p)

    def score(self, X, y) -> float:
        """Hungarian-matched overall accuracy in [0, 1]."""
        self._check_fitted()
        ev = hungarian_accuracy(
            np.asarray(y), self.predict(X), self.run_state_.label_space, strict=False
        )
        return ev.acc_all / 100.0

    def _validated(self, X) -> np.ndarray:
        return FeatureMatrix(np.asarray(X)).data

    def _check_fitted(self) -> None:
        if not hasattr(self, "run_state_"):
            raise NotFittedError("call fit before using this estimator")
