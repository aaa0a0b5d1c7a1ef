"""Minimum-cost rectangular assignment via shortest augmenting paths.

The solver maintains row/column potentials and grows one augmenting path per
row (Jonker-Volgenant style).  Every scan iterates columns in increasing
index with strict comparisons, so equal-cost solutions resolve
deterministically in favor of the lowest (row, column) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["CostMatrix", "solve_assignment"]


@dataclass(frozen=True)
class CostMatrix:
    """Dense row-major cost table for an assignment problem."""

    rows: int
    cols: int
    costs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.costs, dtype=np.float64)
        if arr.shape != (self.rows, self.cols):
            raise ValueError(f"costs shape {arr.shape} != ({self.rows}, {self.cols})")
        if self.rows > 0 and self.cols > 0 and not np.all(np.isfinite(arr)):
            raise ValueError("assignment costs must be finite")
        object.__setattr__(self, "costs", arr)

    @classmethod
    def from_array(cls, costs) -> "CostMatrix":
        arr = np.atleast_2d(np.asarray(costs, dtype=np.float64))
        return cls(arr.shape[0], arr.shape[1], arr)


def _solve_wide(cost: np.ndarray) -> list[int]:
    """Column matched to each row, for a matrix with rows <= cols.

    Classic potentials formulation, 1-indexed internally: u/v are row and
    column potentials, match[j] is the row currently holding column j.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = [-1] * n
    for j in range(1, m + 1):
        if match[j] != 0:
            row_to_col[match[j] - 1] = j - 1
    return row_to_col


def solve_assignment(costs) -> list[tuple[int, int]]:
    """Minimum-total-cost matching of size min(rows, cols).

    Accepts a CostMatrix or any 2-d array of finite costs.  Returns (row,
    col) pairs sorted by row.  Ties in total cost resolve toward the lowest
    (row, col) indices; the result is a pure function of the input.
    """
    if isinstance(costs, CostMatrix):
        cost = costs.costs
    else:
        cost = np.asarray(costs, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-d")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment costs must be finite")
    if n <= m:
        row_to_col = _solve_wide(cost)
        pairs = [(i, j) for i, j in enumerate(row_to_col) if j >= 0]
    else:
        col_to_row = _solve_wide(cost.T)
        pairs = sorted((i, j) for j, i in enumerate(col_to_row) if i >= 0)
    return pairs
