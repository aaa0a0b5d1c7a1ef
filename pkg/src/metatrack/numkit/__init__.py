"""Numerical kernel: graph differentiation, assignment, vector helpers."""

from metatrack.numkit import autodiff
from metatrack.numkit.assignment import CostMatrix, solve_assignment
from metatrack.numkit.autodiff import (
    DifferentiationError,
    Node,
    gradient,
    hessian_vector_product,
    value_and_gradient,
)
from metatrack.numkit.vecmath import as_vector, cosine_similarity, unit

__all__ = [
    "autodiff",
    "Node",
    "DifferentiationError",
    "gradient",
    "value_and_gradient",
    "hessian_vector_product",
    "CostMatrix",
    "solve_assignment",
    "as_vector",
    "unit",
    "cosine_similarity",
]
