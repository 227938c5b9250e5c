"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

UNIT_NORM_ATOL = 1e-6


class DataError(ValueError):
    """Bad input data (shapes, norms, labels, file contents)."""


class ConfigError(ValueError):
    """Bad configuration (hyperparameters, plans, run configs)."""


def as_float_matrix(x, name: str = "data") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DataError(f"{name} must be a 2-D array, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_unit_rows(x: np.ndarray, name: str = "data", atol: float = UNIT_NORM_ATOL) -> None:
    norms = np.linalg.norm(x, axis=1)
    bad = np.abs(norms - 1.0) > atol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DataError(
            f"{name} rows must be unit-norm within {atol}: row {i} has norm {norms[i]:.8f}"
        )


def check_labels(labels, n: int, name: str = "labels") -> np.ndarray:
    arr = np.asarray(labels)
    if arr.shape != (n,):
        raise DataError(f"{name} must have shape ({n},), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise DataError(f"{name} must be integers")
    arr = arr.astype(np.int64)
    if np.any(arr < -1):
        raise DataError(f"{name} must be class ids >= 0 or -1 for unlabeled")
    return arr


def check_probability_vector(p, name: str = "p", atol: float = 1e-9) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{name} must be 1-D")
    if np.any(arr < 0):
        raise DataError(f"{name} has negative entries")
    if abs(arr.sum() - 1.0) > atol:
        raise DataError(f"{name} must sum to 1, got {arr.sum()!r}")
    return arr


def check_positive(value: float, name: str) -> None:
    if not value > 0:
        raise ConfigError(f"{name} must be > 0, got {value}")


def check_non_negative(value: float, name: str) -> None:
    if value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value}")
