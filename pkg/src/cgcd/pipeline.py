"""End-to-end training pipeline: supervised Stage-0, T continual discovery
stages, prototype/hardness bookkeeping, reporting, and checkpoints.

Every stage draws its randomness from named substreams of one base seed, so
identical (plan, data, hyper, seed) inputs produce byte-identical reports and
checkpoints, and a resumed run equals an uninterrupted one.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .clustering import clustering_guided_init, estimate_new_class_count, spherical_kmeans
from .data_io import REPORT_SCHEMA, StagePlan, emit_report, validate_report
from .discovery import (
    entropy_reg_node,
    make_views,
    marginal_node,
    prior_reg_node,
    self_distill_node,
    sharpened_targets,
)
from .evaluation import (
    StageEval,
    discovery_metric,
    forgetting_metric,
    hardness_bias_metrics,
    hungarian_accuracy,
    prediction_bias_metrics,
)
from .losses import LossValue, ScheduleState, ce_rows, self_contrastive_node, sgd_step, sup_contrastive_node
from .model import ModelGraph, ModelState, adapt, classify, init_model, predict_labels
from .retention import PrototypeStore, estimate_prototypes, old_objective_node, sample_replay_features, shared_radius
from .rng import substream
from .types import FeatureMatrix, HyperParams, LabelSpace, RunModes
from .validation import ConfigError, DataError

logger = logging.getLogger(__name__)

__all__ = [
    "RunState",
    "train_stage0",
    "train_continual_stage",
    "run_experiment",
    "stage0_objective",
    "continual_objective",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"CGRS"
CHECKPOINT_VERSION = 1


@dataclass
class RunState:
    """Everything the pipeline carries between stages."""

    model: ModelState
    prev_model: ModelState | None
    store: PrototypeStore
    label_space: LabelSpace
    stage_evals: list[StageEval] = field(default_factory=list)
    seed: int = 0
    prediction_bias: dict | None = None
    hardness_snapshots: list[dict] = field(default_factory=list)

    def snapshot_hardness(self) -> None:
        if self.store.hardness is None:
            return
        self.hardness_snapshots.append(
            {
                "stage": self.label_space.stage_index,
                "classes": [int(c) for c in self.store.classes()],
                "scores": [float(x) for x in self.store.hardness_scores],
                "probs": [float(x) for x in self.store.hardness],
            }
        )


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def stage0_objective_node(
    graph: ModelGraph,
    labels: np.ndarray,
    hyper: HyperParams,
    views: tuple[np.ndarray, np.ndarray],
) -> Node:
    """Supervised cross-entropy plus both contrastive terms (initial stage)."""
    u1, u2 = views
    z1 = graph.adapt(u1)
    z2 = graph.adapt(u2)
    p1 = graph.classify(z1, hyper.tau_p)
    loss = ce_rows(_one_hot(labels, graph.model.k), p1)
    if u1.shape[0] >= 2:
        h1 = graph.project(z1)
        h2 = graph.project(z2)
        loss = loss + hyper.lambda0 * sup_contrastive_node(h1, h2, labels, hyper.tau_c_sup)
        loss = loss + (1.0 - hyper.lambda0) * self_contrastive_node(h1, h2, hyper.tau_c_self)
    else:
        logger.warning("batch of size 1: contrastive terms skipped")
    return loss


def stage0_objective(
    batch: np.ndarray,
    labels: np.ndarray,
    model: ModelState,
    hyper: HyperParams,
    rng: np.random.Generator | None = None,
    views: tuple[np.ndarray, np.ndarray] | None = None,
) -> LossValue:
    if views is None:
        if rng is None:
            raise ConfigError("either views or rng must be provided")
        views = make_views(batch, hyper.sigma_aug, rng)
    graph = ModelGraph(model)
    loss = stage0_objective_node(graph, np.asarray(labels, dtype=np.int64), hyper, views)
    ad.backward(loss)
    return LossValue(loss.item(), graph.grads())


def continual_objective_node(
    graph: ModelGraph,
    prev_model: ModelState,
    label_space: LabelSpace,
    hyper: HyperParams,
    batch: np.ndarray,
    views: tuple[np.ndarray, np.ndarray],
    targets: tuple[np.ndarray, np.ndarray],
    replay: tuple[np.ndarray, np.ndarray] | None,
    entropy_on: bool = True,
    prior: tuple[float, float] | None = None,
    kd_on: bool = True,
) -> Node:
    """The full continual-stage objective as one graph."""
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
    loss = loss + old_objective_node(graph, prev_model, hyper, batch, replay, kd_on=kd_on)
    if u1.shape[0] >= 2:
        h1 = graph.project(z1)
        h2 = graph.project(z2)
        loss = loss + hyper.lambda3 * self_contrastive_node(h1, h2, hyper.tau_c_self)
    return loss


def continual_objective(
    batch: np.ndarray,
    model: ModelState,
    prev_model: ModelState,
    store: PrototypeStore,
    label_space: LabelSpace,
    hyper: HyperParams,
    rng_aug: np.random.Generator | None = None,
    rng_replay: np.random.Generator | None = None,
    views: tuple[np.ndarray, np.ndarray] | None = None,
    targets: tuple[np.ndarray, np.ndarray] | None = None,
    replay: tuple[np.ndarray, np.ndarray] | None = None,
    modes: RunModes = RunModes(),
    gt_ratio: tuple[float, float] | None = None,
) -> LossValue:
    """LossValue for the full continual objective; inputs may be pinned for
    gradient checking."""
    if views is None:
        if rng_aug is None:
            raise ConfigError("either views or rng_aug must be provided")
        views = make_views(batch, hyper.sigma_aug, rng_aug)
    if targets is None:
        targets = sharpened_targets(model, views, hyper.tau_t)
    if replay is None and modes.replay and hyper.n_proto > 0:
        if rng_replay is None:
            raise ConfigError("either replay or rng_replay must be provided")
        probs = None if modes.hardness_sampling else _uniform_probs(store)
        replay = sample_replay_features(store, hyper.n_proto, rng_replay, probs=probs)
    graph = ModelGraph(model)
    loss = continual_objective_node(
        graph,
        prev_model,
        label_space,
        hyper,
        batch,
        views,
        targets,
        replay,
        entropy_on=modes.entropy_reg,
        prior=gt_ratio if modes.prior_reg else None,
        kd_on=modes.knowledge_distillation,
    )
    ad.backward(loss)
    return LossValue(loss.item(), graph.grads())


def _uniform_probs(store: PrototypeStore) -> np.ndarray:
    k = len(store.classes())
    return np.full(k, 1.0 / k)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _apply_step(model: ModelState, grads: dict[str, np.ndarray], schedule: ScheduleState) -> None:
    updated = sgd_step(model.params(), grads, schedule)
    model.adapter_w = updated["adapter_w"]
    model.adapter_b = updated["adapter_b"]
    model.projection = updated["projection"]
    model.heads = updated["heads"]


def _derived_seed(seed: int, name: str, stage: int) -> int:
    return int(substream(seed, name, stage).integers(2**63))


def train_stage0(data: FeatureMatrix, hyper: HyperParams) -> RunState:
    """Supervised training on the labeled initial classes, then prototype,
    radius, and hardness bookkeeping."""
    if data.labels is None or np.any(data.labels < 0):
        raise DataError("stage 0 requires fully labeled data")
    classes = np.unique(data.labels)
    k_init = int(classes.max()) + 1
    if not np.array_equal(classes, np.arange(k_init)):
        raise DataError("stage 0 labels must be contiguous ids 0..k_init-1")
    counts = np.bincount(data.labels, minlength=k_init)
    small = np.flatnonzero(counts < 2)
    if small.size:
        logger.warning(
            "class(es) %s have < 2 samples; contrastive positives may be empty",
            small.tolist(),
        )
    model = init_model(data.dim, k_init, hyper, substream(hyper.seed, "init"))
    rng_aug = substream(hyper.seed, "augment", 0)
    for epoch in range(hyper.epochs_init):
        schedule = ScheduleState(hyper.lr_init, hyper.epochs_init, epoch)
        shuffle = substream(hyper.seed, "shuffle", 0, epoch)
        for idx in _batches(data.n, hyper.batch_size, shuffle):
            loss = stage0_objective(data.data[idx], data.labels[idx], model, hyper, rng=rng_aug)
            _apply_step(model, loss.grads, schedule)
    z = adapt(model, data.data)
    store = PrototypeStore(radius=0.0, tau_h=hyper.tau_h)
    protos = estimate_prototypes(z, data.labels, range(k_init), fallback_heads=model.heads)
    for c, mu in protos.items():
        store.add(c, mu, stage=0)
    store.radius = shared_radius(z, data.labels, k_init)
    if k_init >= 2:
        store.recompute_hardness()
    else:
        logger.warning("k_init = 1: hardness distribution undefined until more classes exist")
    state = RunState(
        model=model,
        prev_model=None,
        store=store,
        label_space=LabelSpace(0, k_init, k_init, 0),
        seed=hyper.seed,
    )
    state.snapshot_hardness()
    return state


def train_continual_stage(
    state: RunState,
    data: FeatureMatrix,
    k_new: int,
    hyper: HyperParams,
    modes: RunModes = RunModes(),
    gt_ratio: tuple[float, float] | None = None,
) -> RunState:
    """One unsupervised discovery stage: head init, training, store update."""
    stage = state.label_space.stage_index + 1
    k_old = state.label_space.k_total
    model = state.model
    prev_model = model.copy()  # frozen end-of-previous-stage model
    z_start = adapt(model, data.data)
    kmeans_seed = _derived_seed(state.seed, "kmeans", stage)
    if modes.estimate_k:
        lo, hi = modes.estimate_k_range or (1, 2 * k_new)
        k_new = estimate_new_class_count(z_start, k_old, (lo, hi), seed=kmeans_seed)
        logger.info("stage %d: estimated k_new = %d", stage, k_new)
    if k_new < 1:
        raise ConfigError("a continual stage needs k_new >= 1")
    k_total = k_old + k_new
    if k_total > data.n:
        raise DataError(f"stage {stage}: k_total = {k_total} exceeds {data.n} samples")
    if modes.entropy_reg:
        clusters = spherical_kmeans(z_start, k_total, seed=kmeans_seed)
        head_norms = np.linalg.norm(model.heads, axis=1, keepdims=True)
        new_heads = clustering_guided_init(clusters.centroids, model.heads / head_norms, k_new)
    else:
        # debiased discovery off: random head init, no regularizer
        new_heads = substream(state.seed, "init", stage).normal(0.0, 1.0, size=(k_new, model.d))
    model.heads = np.vstack([model.heads, new_heads])
    label_space = state.label_space.next_stage(k_new)

    if modes.prior_reg and gt_ratio is None:
        raise ConfigError("prior_reg requires gt_ratio (explicit or from the plan)")
    rng_aug = substream(state.seed, "augment", stage)
    rng_replay = substream(state.seed, "replay", stage)
    for epoch in range(hyper.epochs_cont):
        schedule = ScheduleState(hyper.lr_cont, hyper.epochs_cont, epoch)
        shuffle = substream(state.seed, "shuffle", stage, epoch)
        for idx in _batches(data.n, hyper.batch_size, shuffle):
            loss = continual_objective(
                data.data[idx],
                model,
                prev_model,
                state.store,
                label_space,
                hyper,
                rng_aug=rng_aug,
                rng_replay=rng_replay,
                modes=modes,
                gt_ratio=gt_ratio,
            )
            _apply_step(model, loss.grads, schedule)

    preds = predict_labels(model, data.data)
    z_end = adapt(model, data.data)
    head_norms = np.linalg.norm(model.heads, axis=1, keepdims=True)
    protos = estimate_prototypes(
        z_end, preds, range(k_old, k_total), fallback_heads=model.heads / head_norms
    )
    for c, mu in protos.items():
        state.store.add(c, mu, stage=stage)
    state.store.recompute_hardness()

    model.stage_index = stage
    state.prev_model = prev_model
    state.label_space = label_space
    state.snapshot_hardness()
    return state


def _evaluate_stage(state: RunState, test: FeatureMatrix, strict: bool = True) -> StageEval:
    if test.labels is None or np.any(test.labels < 0):
        raise DataError("evaluation requires labeled test data")
    preds = predict_labels(state.model, test.data)
    return hungarian_accuracy(test.labels, preds, state.label_space, strict=strict)


def build_report(
    state: RunState,
    config_echo: dict | None = None,
    incomplete: bool = False,
) -> dict:
    evals = state.stage_evals
    acc_init_seq = [e.acc_init for e in evals]
    acc_new_seq = [e.acc_new for e in evals if e.stage >= 1 and e.acc_new is not None]
    hardness_bias = None
    if evals and evals[-1].stage >= 1 and state.store.hardness_scores is not None:
        try:
            hardness_bias = hardness_bias_metrics(
                evals[-1].per_class_acc,
                state.label_space.init_ids,
                state.store.hardness_scores,
            )
        except DataError as exc:
            logger.warning("hardness bias metrics unavailable: %s", exc)
    report = {
        "schema": REPORT_SCHEMA,
        "config": config_echo or {},
        "incomplete": incomplete,
        "stages": [e.to_dict() for e in evals],
        "forgetting": forgetting_metric(acc_init_seq) if len(acc_init_seq) >= 2 else None,
        "discovery": discovery_metric(acc_new_seq) if acc_new_seq else None,
        "prediction_bias": state.prediction_bias,
        "hardness_bias": hardness_bias,
        "hardness_snapshots": state.hardness_snapshots,
    }
    validate_report(report)
    return report


def run_experiment(
    plan: StagePlan,
    train_sets: list[FeatureMatrix],
    test_sets: list[FeatureMatrix],
    hyper: HyperParams,
    modes: RunModes = RunModes(),
    out_dir=None,
    config_echo: dict | None = None,
    resume_from=None,
) -> tuple[RunState, dict]:
    """Stage-0 plus plan.t_total continual stages, with per-stage evaluation,
    checkpoints, and the final report."""
    if len(train_sets) != plan.t_total + 1 or len(test_sets) != plan.t_total + 1:
        raise ConfigError(
            f"expected {plan.t_total + 1} train/test sets, got "
            f"{len(train_sets)}/{len(test_sets)}"
        )
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    strict_eval = not modes.estimate_k

    start_stage = 0
    state = None
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.seed != hyper.seed:
            raise ConfigError(
                f"checkpoint seed {state.seed} does not match config seed {hyper.seed}"
            )
        start_stage = state.label_space.stage_index + 1
        logger.info("resuming after stage %d", start_stage - 1)

    def checkpoint(stage: int) -> None:
        if out is not None:
            save_checkpoint(state, out / f"stage_{stage}.cgrs")

    try:
        if start_stage == 0:
            t0 = time.perf_counter()
            state = train_stage0(train_sets[0], hyper)
            state.stage_evals.append(_evaluate_stage(state, test_sets[0]))
            timings["stage_0"] = time.perf_counter() - t0
            checkpoint(0)
            start_stage = 1
        for stage in range(start_stage, plan.t_total + 1):
            t0 = time.perf_counter()
            gt_ratio = None
            if modes.prior_reg:
                gt_ratio = modes.gt_ratios or plan.gt_ratio(stage)
            train_continual_stage(
                state, train_sets[stage], plan.k_new[stage - 1], hyper, modes, gt_ratio
            )
            state.stage_evals.append(_evaluate_stage(state, test_sets[stage], strict=strict_eval))
            if stage == 1:
                probs = classify(
                    state.model, adapt(state.model, test_sets[1].data), hyper.tau_p
                )
                state.prediction_bias = prediction_bias_metrics(
                    probs, test_sets[1].labels, state.label_space
                )
            timings[f"stage_{stage}"] = time.perf_counter() - t0
            checkpoint(stage)
    except Exception:
        if state is not None and out is not None:
            try:
                emit_report(build_report(state, config_echo, incomplete=True), out)
            except Exception:  # the partial report is best-effort
                logger.exception("failed to write the partial report")
        raise

    report = build_report(state, config_echo)
    if out is not None:
        emit_report(report, out)
        (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return state, report


# --- checkpoint serialization -------------------------------------------------

def _pack_model(buf: io.BytesIO, model: ModelState) -> None:
    buf.write(
        struct.pack("<IIIIi", model.d_in, model.d, model.d_proj, model.k, model.stage_index)
    )
    for block in (model.adapter_w, model.adapter_b, model.projection, model.heads):
        buf.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def _unpack_model(buf: io.BytesIO) -> ModelState:
    d_in, d, d_proj, k, stage_index = struct.unpack("<IIIIi", buf.read(20))

    def read_block(*shape):
        count = int(np.prod(shape))
        return np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).copy()

    return ModelState(
        adapter_w=read_block(d, d_in),
        adapter_b=read_block(d),
        projection=read_block(d_proj, d),
        heads=read_block(k, d),
        stage_index=stage_index,
    )


def save_checkpoint(state: RunState, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    ls = state.label_space
    buf.write(
        struct.pack(
            "<IQiIII",
            CHECKPOINT_VERSION,
            state.seed,
            ls.stage_index,
            ls.k_init,
            ls.k_old,
            ls.k_new,
        )
    )
    _pack_model(buf, state.model)
    buf.write(struct.pack("<B", int(state.prev_model is not None)))
    if state.prev_model is not None:
        _pack_model(buf, state.prev_model)
    store_blob = state.store.to_bytes()
    buf.write(struct.pack("<Q", len(store_blob)))
    buf.write(store_blob)
    extra = {
        "stage_evals": [e.to_dict() for e in state.stage_evals],
        "prediction_bias": state.prediction_bias,
        "hardness_snapshots": state.hardness_snapshots,
    }
    extra_blob = json.dumps(extra, sort_keys=False).encode("utf-8")
    buf.write(struct.pack("<Q", len(extra_blob)))
    buf.write(extra_blob)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> RunState:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}")
    version, seed, stage_index, k_init, k_old, k_new = struct.unpack("<IQiIII", buf.read(28))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    model = _unpack_model(buf)
    (has_prev,) = struct.unpack("<B", buf.read(1))
    prev_model = _unpack_model(buf) if has_prev else None
    (store_len,) = struct.unpack("<Q", buf.read(8))
    store = PrototypeStore.from_bytes(buf.read(store_len))
    (extra_len,) = struct.unpack("<Q", buf.read(8))
    extra = json.loads(buf.read(extra_len).decode("utf-8"))
    state = RunState(
        model=model,
        prev_model=prev_model,
        store=store,
        label_space=LabelSpace(stage_index, k_init, k_old, k_new),
        stage_evals=[StageEval.from_dict(d) for d in extra["stage_evals"]],
        seed=int(seed),
        prediction_bias=extra["prediction_bias"],
        hardness_snapshots=extra["hardness_snapshots"],
    )
    return state
