"""Plain-array vector helpers shared across the package."""

from __future__ import annotations

import numpy as np

__all__ = ["as_vector", "unit", "cosine_similarity"]


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Validate and return a finite, non-empty 1-d float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def unit(x, name: str = "vector") -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    arr = as_vector(x, name)
    n = float(np.linalg.norm(arr))
    if n == 0.0:
        raise ValueError(f"{name} has zero norm")
    return arr / n


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; errors on zero norm."""
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return float(np.dot(va, vb) / (na * nb))
