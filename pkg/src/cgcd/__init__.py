"""Continual generalized category discovery over unit-norm feature embeddings."""

from .types import FeatureMatrix, HyperParams, LabelSpace, RunModes
from .model import ModelState, adapt, classify, project, init_model
from .losses import (
    LossValue,
    ScheduleState,
    cross_entropy,
    finite_difference_check,
    self_supervised_contrastive_loss,
    sgd_step,
    supervised_contrastive_loss,
)
from .clustering import (
    ClusteringResult,
    clustering_guided_init,
    estimate_new_class_count,
    silhouette_score,
    spherical_kmeans,
)
from .discovery import (
    MarginalDistribution,
    feature_augment,
    marginal_distribution,
    new_class_objective,
    prior_ratio_regularizer,
    self_distillation_loss,
    soft_entropy_regularizer,
)
from .retention import (
    PrototypeStore,
    estimate_prototypes,
    hardness_distribution,
    knowledge_distillation_loss,
    old_class_objective,
    prototype_replay_loss,
    sample_replay_features,
    shared_radius,
)
from .evaluation import (
    StageEval,
    discovery_metric,
    forgetting_metric,
    hardness_bias_metrics,
    hungarian_accuracy,
    prediction_bias_metrics,
)
from .pipeline import (
    RunState,
    continual_objective,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
    stage0_objective,
    train_continual_stage,
    train_stage0,
)
from .data_io import (
    StagePlan,
    build_cgcd_splits,
    emit_report,
    generate_synthetic_benchmark,
    read_embeddings,
    write_embeddings,
)
from .estimator import ContinualCategoryDiscoverer

__version__ = "0.1.0"

__all__ = [
    "FeatureMatrix",
    "HyperParams",
    "LabelSpace",
    "RunModes",
    "ModelState",
    "adapt",
    "classify",
    "project",
    "init_model",
    "LossValue",
    "ScheduleState",
    "cross_entropy",
    "finite_difference_check",
    "self_supervised_contrastive_loss",
    "sgd_step",
    "supervised_contrastive_loss",
    "ClusteringResult",
    "clustering_guided_init",
    "estimate_new_class_count",
    "silhouette_score",
    "spherical_kmeans",
    "MarginalDistribution",
    "feature_augment",
    "marginal_distribution",
    "new_class_objective",
    "prior_ratio_regularizer",
    "self_distillation_loss",
    "soft_entropy_regularizer",
    "PrototypeStore",
    "estimate_prototypes",
    "hardness_distribution",
    "knowledge_distillation_loss",
    "old_class_objective",
    "prototype_replay_loss",
    "sample_replay_features",
    "shared_radius",
    "StageEval",
    "discovery_metric",
    "forgetting_metric",
    "hardness_bias_metrics",
    "hungarian_accuracy",
    "prediction_bias_metrics",
    "RunState",
    "continual_objective",
    "load_checkpoint",
    "run_experiment",
    "save_checkpoint",
    "stage0_objective",
    "train_continual_stage",
    "train_stage0",
    "StagePlan",
    "build_cgcd_splits",
    "emit_report",
    "generate_synthetic_benchmark",
    "read_embeddings",
    "write_embeddings",
    "ContinualCategoryDiscoverer",
]
