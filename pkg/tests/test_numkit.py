"""Numerical kernel checks: differentiation against finite differences and
closed forms, assignment against exhaustive search."""

import itertools

import numpy as np
import pytest

from metatrack.numkit import (
    CostMatrix,
    DifferentiationError,
    cosine_similarity,
    gradient,
    hessian_vector_product,
    solve_assignment,
    value_and_gradient,
)
from metatrack.numkit import autodiff as ad


def central_difference_gradient(f, x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        g[i] = (f(x + step) - f(x - step)) / (2 * eps)
    return g


def graph_value(f, x):
    return float(f(ad.constant(x)).value)


# A few scalar-valued graph programs exercising every primitive.
def program_quadratic(theta):
    return 0.5 * ad.dot(theta, theta)


def program_mixed(theta):
    w = ad.constant(np.array([0.3, -1.2, 0.7, 0.05]))
    s = ad.dot(theta, w)
    return ad.log(ad.exp(s) + 1.0) + 0.1 * ad.dot(theta, theta)


def program_logsumexp(theta):
    m = ad.constant(np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0 - 0.4)
    logits = ad.matvec(m, theta)
    return ad.log_sum_exp(logits) - ad.pick(logits, 1)


def program_slices(theta):
    a = ad.narrow(theta, 0, 2)
    b = ad.narrow(theta, 2, 2)
    m = ad.reshape(theta, (2, 2))
    return ad.dot(a, b) + 0.5 * ad.dot(ad.matvec(m, a), b) + ad.total(ad.exp(theta * 0.1))


def program_norms(theta):
    u = ad.constant(np.array([1.0, -2.0, 0.5, 0.25]))
    return ad.dot(theta, u) / (ad.norm(theta) * ad.norm(u)) + ad.sqrt(
        ad.dot(theta, theta) + 1.0
    )


def program_outer(theta):
    a = ad.narrow(theta, 0, 2)
    b = ad.narrow(theta, 2, 3)
    g = ad.outer(a, b)
    return ad.dot(ad.vecmat(a, g), b) + ad.total(g)


PROGRAMS = [
    (program_quadratic, 4),
    (program_mixed, 4),
    (program_logsumexp, 4),
    (program_slices, 4),
    (program_norms, 4),
    (program_outer, 5),
]


class TestGradient:
    def test_product_example(self):
        # d(t1*t2)/dt at (2, 3) is (3, 2)
        f = lambda t: ad.pick(t, 0) * ad.pick(t, 1)
        np.testing.assert_allclose(gradient(f, [2.0, 3.0]), [3.0, 2.0], rtol=0, atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for f, dim in PROGRAMS:
            for _ in range(5):
                x = rng.normal(0.4, 1.0, dim)
                got = gradient(f, x)
                want = central_difference_gradient(lambda z: graph_value(f, z), x)
                np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-7)

    def test_value_and_gradient_agree(self):
        x = np.array([0.3, -0.2, 1.1, 0.4])
        v, g = value_and_gradient(program_mixed, x)
        assert v == graph_value(program_mixed, x)
        np.testing.assert_array_equal(g, gradient(program_mixed, x))

    def test_constant_function_has_zero_gradient(self):
        f = lambda t: ad.constant(3.5) * ad.constant(2.0)
        np.testing.assert_array_equal(gradient(f, [1.0, 2.0]), [0.0, 0.0])

    def test_gradient_is_deterministic(self):
        x = np.array([0.9, -0.4, 0.2, 1.7])
        a = gradient(program_slices, x)
        b = gradient(program_slices, x)
        np.testing.assert_array_equal(a, b)

    def test_log_of_negative_raises(self):
        f = lambda t: ad.log(ad.pick(t, 0))
        with pytest.raises(DifferentiationError, match="log"):
            f(ad.constant(np.array([-1.0])))

    def test_scalar_broadcast_rules(self):
        # scalar * vector and vector / scalar both reduce correctly
        f = lambda t: ad.total(ad.pick(t, 0) * ad.narrow(t, 1, 3)) + ad.total(
            ad.narrow(t, 1, 3) / ad.pick(t, 0)
        )
        x = np.array([1.7, 0.3, -0.8, 2.0])
        want = central_difference_gradient(lambda z: graph_value(f, z), x)
        np.testing.assert_allclose(gradient(f, x), want, rtol=1e-6, atol=1e-8)


class TestHessianVectorProduct:
    def test_diagonal_quadratic_closed_form(self):
        # f = 0.5 * theta' diag(2, 3) theta, so H v = (2, 3) at v = (1, 1)
        d = ad.constant(np.array([2.0, 3.0]))
        f = lambda t: 0.5 * ad.dot(t, ad.mul(d, t))
        got = hessian_vector_product(f, [10.0, -4.0], [1.0, 1.0])
        np.testing.assert_allclose(got, [2.0, 3.0], rtol=0, atol=1e-12)

    def test_matches_difference_of_gradients(self):
        rng = np.random.default_rng(21)
        eps = 1e-6
        for f, dim in PROGRAMS:
            x = rng.normal(0.5, 0.8, dim)
            v = rng.normal(0.0, 1.0, dim)
            got = hessian_vector_product(f, x, v)
            want = (gradient(f, x + eps * v) - gradient(f, x - eps * v)) / (2 * eps)
            np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-6)

    def test_linear_in_direction(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0.0, 1.0, 4)
        v1 = rng.normal(0.0, 1.0, 4)
        v2 = rng.normal(0.0, 1.0, 4)
        f = program_mixed
        lhs = hessian_vector_product(f, x, 2.0 * v1 + 0.5 * v2)
        rhs = 2.0 * hessian_vector_product(f, x, v1) + 0.5 * hessian_vector_product(f, x, v2)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)

    def test_symmetry_of_bilinear_form(self):
        rng = np.random.default_rng(11)
        x = rng.normal(0.0, 1.0, 4)
        u = rng.normal(0.0, 1.0, 4)
        w = rng.normal(0.0, 1.0, 4)
        f = program_logsumexp
        left = float(np.dot(u, hessian_vector_product(f, x, w)))
        right = float(np.dot(w, hessian_vector_product(f, x, u)))
        np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-12)

    def test_linear_function_has_zero_hessian(self):
        f = lambda t: ad.dot(t, ad.constant(np.array([1.0, -2.0, 3.0])))
        got = hessian_vector_product(f, [0.2, 0.4, -0.1], [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(got, np.zeros(3))


class TestCosineSimilarity:
    def test_frozen_example(self):
        got = cosine_similarity([1.0, 0.0], [1.0, 1.0])
        np.testing.assert_allclose(got, 0.7071067811865475, rtol=0, atol=1e-12)

    def test_bounds_and_self_similarity(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a = rng.normal(0, 1, 6)
            b = rng.normal(0, 1, 6)
            c = cosine_similarity(a, b)
            assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12
        a = rng.normal(0, 1, 6)
        np.testing.assert_allclose(cosine_similarity(a, a), 1.0, atol=1e-12)
        np.testing.assert_allclose(cosine_similarity(a, -a), -1.0, atol=1e-12)

    def test_scale_invariance(self):
        a = np.array([0.3, -1.0, 2.0])
        b = np.array([1.5, 0.2, -0.4])
        np.testing.assert_allclose(
            cosine_similarity(3.7 * a, b), cosine_similarity(a, 0.01 * b), atol=1e-12
        )

    def test_zero_norm_raises(self):
        with pytest.raises(ValueError, match="zero"):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_non_finite_raises(self):
        with pytest.raises(ValueError):
            cosine_similarity([np.nan, 1.0], [1.0, 0.0])


def brute_force_assignment(cost):
    """Exhaustive minimum; ties by lexicographically smallest pair list."""
    n, m = cost.shape
    best = None
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            pairs = sorted(zip(range(n), cols))
            val = sum(cost[i, j] for i, j in pairs)
            key = (val, pairs)
            if best is None or key < best:
                best = key
    else:
        for rows in itertools.permutations(range(n), m):
            pairs = sorted(zip(rows, range(m)))
            val = sum(cost[i, j] for i, j in pairs)
            key = (val, pairs)
            if best is None or key < best:
                best = key
    return best


class TestAssignment:
    def test_frozen_example(self):
        pairs = solve_assignment([[1.0, 2.0], [2.0, 1.0]])
        assert pairs == [(0, 0), (1, 1)]

    def test_all_equal_ties_resolve_low_indices(self):
        pairs = solve_assignment(np.ones((2, 2)))
        assert pairs == [(0, 0), (1, 1)]
        pairs = solve_assignment(np.ones((3, 5)))
        assert pairs == [(0, 0), (1, 1), (2, 2)]

    def test_matches_brute_force_cost(self):
        rng = np.random.default_rng(17)
        for _ in range(300):
            n = int(rng.integers(1, 6))
            m = int(rng.integers(1, 6))
            cost = np.round(rng.uniform(0, 10, (n, m)), 3)
            pairs = solve_assignment(cost)
            assert len(pairs) == min(n, m)
            rows = [i for i, _ in pairs]
            cols = [j for _, j in pairs]
            assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
            got = sum(cost[i, j] for i, j in pairs)
            want = brute_force_assignment(cost)[0]
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)

    def test_deterministic_under_duplicated_costs(self):
        rng = np.random.default_rng(29)
        for _ in range(100):
            cost = rng.integers(0, 3, (4, 4)).astype(float)
            a = solve_assignment(cost)
            b = solve_assignment(cost.copy())
            assert a == b

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            solve_assignment([[np.inf, 1.0], [1.0, 2.0]])

    def test_empty_matrix(self):
        assert solve_assignment(np.zeros((0, 3))) == []

    def test_cost_matrix_wrapper(self):
        cm = CostMatrix.from_array([[4.0, 1.0], [2.0, 8.0]])
        assert cm.rows == 2 and cm.cols == 2
        assert solve_assignment(cm) == [(0, 1), (1, 0)]
        with pytest.raises(ValueError):
            CostMatrix(2, 2, np.ones((2, 3)))
