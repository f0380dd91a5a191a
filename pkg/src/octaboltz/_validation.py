"""Input validation helpers shared by the public entry points."""

from __future__ import annotations

import math

import numpy as np


def check_positive(value, name: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a real number, got {value!r}") from None
    if not math.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_nonnegative(value, name: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0.0:
        raise ValueError(f"{name} must be non-negative and finite, got {value!r}")
    return value


def check_vector3(xi, name: str = "xi") -> np.ndarray:
    arr = np.asarray(xi, dtype=float)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def check_points(xi, name: str = "xi") -> np.ndarray:
    """Return ``xi`` as a float array of shape ``(n, 3)``."""
    arr = np.asarray(xi, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {np.shape(xi)}")
    return arr


def check_densities(N, size: int, name: str = "N") -> np.ndarray:
    """Validate a density vector (or a stack of them along the last axis)."""
    arr = np.asarray(N, dtype=float)
    if arr.shape[-1:] != (size,):
        raise ValueError(
            f"{name} has trailing dimension {arr.shape[-1:] or '()'}, "
            f"expected ({size},) to match the coefficient set"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
