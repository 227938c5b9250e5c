"""Binary embedding files, stage split construction, synthetic benchmark
generation, and the run report schema.

The "CGE1" layout: magic (4 bytes) | version u32 | n u64 | d u32 | flags u8,
then n*d float32 little-endian row-major values, then n int32 labels when
flags bit 0 is set. Embeddings are stored in single precision; all in-memory
training math is double.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import substream
from .types import FeatureMatrix
from .validation import ConfigError, DataError

logger = logging.getLogger(__name__)

__all__ = [
    "EmbeddingFormatError",
    "write_embeddings",
    "read_embeddings",
    "StagePlan",
    "SplitResult",
    "build_cgcd_splits",
    "generate_synthetic_benchmark",
    "emit_report",
    "REPORT_KEYS",
    "STAGE_KEYS",
    "validate_report",
]

EMBED_MAGIC = b"CGE1"
EMBED_VERSION = 1
_HEADER = struct.Struct("<4sIQIB")  # magic, version, n, d, flags
READ_NORM_ATOL = 1e-5


class EmbeddingFormatError(DataError):
    """Malformed embedding file; ``code`` names the specific failure."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def write_embeddings(path, features: FeatureMatrix) -> None:
    """Write a CGE1 file; float32 payload, labels appended when present."""
    if features.n < 1:
        raise DataError("refusing to write an empty embedding file")
    flags = 1 if features.labels is not None else 0
    payload = features.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, features.n, features.dim, flags))
        fh.write(payload)
        if flags & 1:
            fh.write(features.labels.astype("<i4").tobytes())


def read_embeddings(path) -> FeatureMatrix:
    """Read and validate a CGE1 file; renormalizes drifted rows with a warning."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError("truncated_header", f"file too short: {len(raw)} bytes")
    magic, version, n, d, flags = _HEADER.unpack_from(raw)
    if magic != EMBED_MAGIC:
        raise EmbeddingFormatError("bad_magic", f"bad magic {magic!r}")
    if version != EMBED_VERSION:
        raise EmbeddingFormatError("bad_version", f"unsupported version {version}")
    expected = _HEADER.size + 4 * n * d + (4 * n if flags & 1 else 0)
    if len(raw) != expected:
        raise EmbeddingFormatError(
            "truncated_payload",
            f"expected {expected} bytes, found {len(raw)}",
        )
    offset = _HEADER.size
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    data = data.astype(np.float64)
    labels = None
    if flags & 1:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=offset + 4 * n * d)
        labels = labels.astype(np.int64)
    norms = np.linalg.norm(data, axis=1)
    drift = np.abs(norms - 1.0)
    if np.any(drift > READ_NORM_ATOL):
        logger.warning(
            "renormalizing %d row(s) with norm drift above %g",
            int((drift > READ_NORM_ATOL).sum()),
            READ_NORM_ATOL,
        )
    data = data / norms[:, None]
    return FeatureMatrix(data, labels)


@dataclass(frozen=True)
class StagePlan:
    """The continual schedule: which class counts and sample budgets per stage."""

    k_init: int
    t_total: int
    k_new: tuple[int, ...]
    samples_per_new: int
    samples_per_old: int
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.k_init < 1:
            raise ConfigError("k_init must be >= 1")
        if self.t_total < 0:
            raise ConfigError("t_total must be >= 0")
        k_new = self.k_new
        if isinstance(k_new, int):
            k_new = (k_new,) * self.t_total
        else:
            k_new = tuple(int(k) for k in k_new)
        if len(k_new) != self.t_total:
            raise ConfigError(
                f"k_new must list one count per stage: got {len(k_new)} for t_total={self.t_total}"
            )
        if any(k < 1 for k in k_new):
            raise ConfigError("every stage must introduce at least one new class")
        object.__setattr__(self, "k_new", k_new)
        if self.samples_per_new < 1 or (self.t_total > 0 and self.samples_per_old < 1):
            raise ConfigError("per-class sample counts must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")

    @property
    def k_totals(self) -> list[int]:
        totals = [self.k_init]
        for k in self.k_new:
            totals.append(totals[-1] + k)
        return totals

    def gt_ratio(self, stage: int) -> tuple[float, float]:
        """True old/new sample ratio of stage t's unlabeled data."""
        if not 1 <= stage <= self.t_total:
            raise ConfigError(f"stage {stage} outside [1, {self.t_total}]")
        n_old = self.k_totals[stage - 1] * self.samples_per_old
        n_new = self.k_new[stage - 1] * self.samples_per_new
        total = n_old + n_new
        return n_old / total, n_new / total


@dataclass
class SplitResult:
    train: list[FeatureMatrix]  # index = stage
    test: list[FeatureMatrix]
    class_mapping: dict[int, int]  # source class id -> engine class id


def build_cgcd_splits(source: FeatureMatrix, plan: StagePlan) -> SplitResult:
    """Deterministic per-stage train/test splits from one labeled source.

    A test fraction per class is reserved up front; stage train samples are
    drawn without replacement from each class's remaining pool, and exhausted
    pools are an error rather than silent reuse.
    """
    if source.labels is None or np.any(source.labels < 0):
        raise DataError("split construction needs a fully labeled source")
    classes = np.unique(source.labels)
    needed = plan.k_init + sum(plan.k_new)
    if classes.size < needed:
        raise DataError(f"source has {classes.size} classes but the plan needs {needed}")
    rng = substream(plan.seed, "split")
    order = classes[rng.permutation(classes.size)][:needed]
    mapping = {int(src): engine for engine, src in enumerate(order)}

    pools: dict[int, list[int]] = {}
    test_idx: dict[int, np.ndarray] = {}
    for src in order:
        engine = mapping[int(src)]
        idx = np.flatnonzero(source.labels == src)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(np.floor(plan.test_fraction * idx.size))
        if n_test < 1:
            raise DataError(f"class {int(src)} has too few samples for a test split")
        test_idx[engine] = np.sort(idx[:n_test])
        pools[engine] = list(idx[n_test:])

    def draw(engine_cls: int, count: int, stage: int) -> list[int]:
        pool = pools[engine_cls]
        if len(pool) < count:
            raise DataError(
                f"class {engine_cls} exhausted at stage {stage}: "
                f"needs {count} more samples, has {len(pool)}"
            )
        taken, pools[engine_cls] = pool[:count], pool[count:]
        return taken

    def to_matrix(rows: list[int], engine_labels: list[int]) -> FeatureMatrix:
        return FeatureMatrix(source.data[rows], np.asarray(engine_labels, dtype=np.int64))

    k_totals = plan.k_totals
    train_sets: list[FeatureMatrix] = []
    test_sets: list[FeatureMatrix] = []
    for stage in range(plan.t_total + 1):
        rows: list[int] = []
        labels: list[int] = []
        if stage == 0:
            for engine in range(plan.k_init):
                taken = draw(engine, plan.samples_per_new, stage)
                rows.extend(taken)
                labels.extend([engine] * len(taken))
        else:
            k_old = k_totals[stage - 1]
            for engine in range(k_old, k_totals[stage]):
                taken = draw(engine, plan.samples_per_new, stage)
                rows.extend(taken)
                labels.extend([engine] * len(taken))
            for engine in range(k_old):
                taken = draw(engine, plan.samples_per_old, stage)
                rows.extend(taken)
                labels.extend([engine] * len(taken))
        train_sets.append(to_matrix(rows, labels))
        t_rows: list[int] = []
        t_labels: list[int] = []
        for engine in range(k_totals[stage]):
            t_rows.extend(test_idx[engine].tolist())
            t_labels.extend([engine] * test_idx[engine].size)
        test_sets.append(to_matrix(t_rows, t_labels))
    return SplitResult(train_sets, test_sets, mapping)


def generate_synthetic_benchmark(
    k_total: int,
    d: int,
    samples_per_class: int,
    angular_margin_deg: float,
    noise_scale: float,
    seed: int = 0,
    max_attempts: int = 50000,
) -> FeatureMatrix:
    """Labeled unit features around class directions with a pairwise angle floor."""
    if k_total < 1:
        raise ConfigError(f"k_total must be >= 1, got {k_total}")
    if d < 2:
        raise ConfigError(f"d must be >= 2, got {d}")
    if samples_per_class < 1:
        raise ConfigError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if noise_scale < 0:
        raise ConfigError(f"noise_scale must be >= 0, got {noise_scale}")
    rng = substream(seed, "synthetic")
    max_cos = np.cos(np.deg2rad(angular_margin_deg))
    directions = np.empty((k_total, d))
    placed = 0
    attempts = 0
    while placed < k_total:
        attempts += 1
        if attempts > max_attempts:
            raise DataError(
                f"could only place {placed}/{k_total} directions with margin "
                f"{angular_margin_deg} degrees in dimension {d}"
            )
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if placed and np.any(directions[:placed] @ v > max_cos):
            continue
        directions[placed] = v
        placed += 1
    n = k_total * samples_per_class
    labels = np.repeat(np.arange(k_total), samples_per_class)
    samples = directions[labels]
    if noise_scale > 0:
        samples = samples + rng.normal(0.0, noise_scale, size=(n, d))
    norms = np.linalg.norm(samples, axis=1, keepdims=True)
    return FeatureMatrix(samples / norms, labels)


REPORT_KEYS = (
    "schema",
    "config",
    "incomplete",
    "stages",
    "forgetting",
    "discovery",
    "prediction_bias",
    "hardness_bias",
    "hardness_snapshots",
)
STAGE_KEYS = (
    "stage",
    "all",
    "old",
    "new",
    "acc_init",
    "per_class",
    "permutation",
    "old_classes_fixed",
)
REPORT_SCHEMA = "cgcd-report-v1"


def validate_report(report: dict) -> None:
    extra = set(report) - set(REPORT_KEYS)
    missing = set(REPORT_KEYS) - set(report)
    if extra:
        raise DataError(f"report has extraneous keys: {sorted(extra)}")
    if missing:
        raise DataError(f"report is missing keys: {sorted(missing)}")
    if report["schema"] != REPORT_SCHEMA:
        raise DataError(f"unknown report schema {report['schema']!r}")
    for stage in report["stages"]:
        extra = set(stage) - set(STAGE_KEYS)
        missing = set(STAGE_KEYS) - set(stage)
        if extra:
            raise DataError(f"stage entry has extraneous keys: {sorted(extra)}")
        if missing:
            raise DataError(f"stage entry is missing keys: {sorted(missing)}")


def report_to_json(report: dict) -> str:
    validate_report(report)
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


def emit_report(report: dict, out_dir) -> Path:
    """Write report.json plus a plot-ready accuracies.csv; returns the JSON path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    json_path.write_text(report_to_json(report))
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    writer.writerow(["stage", "all", "old", "new", "acc_init"])
    for stage in report["stages"]:
        writer.writerow(
            [
                stage["stage"],
                f"{stage['all']:.2f}",
                f"{stage['old']:.2f}",
                "" if stage["new"] is None else f"{stage['new']:.2f}",
                f"{stage['acc_init']:.2f}",
            ]
        )
    (out / "accuracies.csv").write_text(csv_buf.getvalue())
    return json_path
