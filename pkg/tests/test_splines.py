"""Spline bases, tensor designs, symmetric surfaces, difference penalties."""

import numpy as np
import pytest

from stratmix import splines as S
from stratmix.domain import AgeGrid


def naive_cox_de_boor(x, knots, degree, i):
    """Textbook recursive B-spline evaluation, the independent oracle."""
    if degree == 0:
        # half-open spans, closed at the final knot
        if knots[i] <= x < knots[i + 1]:
            return 1.0
        if x == knots[-1] and knots[i] < knots[i + 1] <= knots[-1] \
                and knots[i + 1] == knots[-1]:
            return 1.0
        return 0.0
    left = 0.0
    if knots[i + degree] > knots[i]:
        left = (x - knots[i]) / (knots[i + degree] - knots[i]) \
            * naive_cox_de_boor(x, knots, degree - 1, i)
    right = 0.0
    if knots[i + degree + 1] > knots[i + 1]:
        right = (knots[i + degree + 1] - x) / (knots[i + degree + 1] - knots[i + 1]) \
            * naive_cox_de_boor(x, knots, degree - 1, i + 1)
    return left + right


class TestBasis:
    def test_partition_of_unity(self):
        for lo, hi, M in ((0, 30, 7), (18, 84, 15), (5, 12, 4)):
            basis = S.bspline_basis(AgeGrid.from_range(lo, hi), M)
            np.testing.assert_allclose(basis.B.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(basis.B >= 0)

    def test_minimum_basis_left_endpoint(self):
        basis = S.bspline_basis(AgeGrid.from_range(0, 10), 4)
        np.testing.assert_allclose(basis.B[0], [1, 0, 0, 0], atol=1e-14)

    def test_too_few_functions_rejected(self):
        with pytest.raises(ValueError):
            S.bspline_basis(AgeGrid.from_range(0, 10), 3)

    def test_matches_naive_recursion(self):
        grid = AgeGrid.from_range(0, 20)
        M = 8
        basis = S.bspline_basis(grid, M)
        rng = np.random.default_rng(0)
        for a in rng.choice(grid.A, size=6, replace=False):
            x = float(grid.ages[a])
            for i in range(M):
                ref = naive_cox_de_boor(x, basis.knots, 3, i)
                assert basis.B[a, i] == pytest.approx(ref, abs=1e-10)


class TestTensorDesign:
    def test_ones_coefficients_give_unit_surface(self):
        b = S.bspline_basis(AgeGrid.from_range(0, 9), 5)
        Phi = S.tensor_design(b, b)
        surf = (Phi @ np.ones(25)).reshape(10, 10)
        np.testing.assert_allclose(surf, 1.0, atol=1e-12)

    def test_rank_one_coefficients(self):
        rng = np.random.default_rng(1)
        b = S.bspline_basis(AgeGrid.from_range(0, 7), 5)
        u, v = rng.standard_normal(5), rng.standard_normal(5)
        Phi = S.tensor_design(b, b)
        surf = (Phi @ np.outer(u, v).ravel()).reshape(8, 8)
        np.testing.assert_allclose(surf, np.outer(b.B @ u, b.B @ v), atol=1e-12)

    def test_vectorization_matches_dense_product(self):
        rng = np.random.default_rng(2)
        b1 = S.bspline_basis(AgeGrid.from_range(0, 5), 4)
        b2 = S.bspline_basis(AgeGrid.from_range(0, 5), 6)
        Xi = rng.standard_normal((4, 6))
        Phi = S.tensor_design(b1, b2)
        lhs = (Phi @ Xi.ravel()).reshape(6, 6)
        rhs = b1.B @ Xi @ b2.B.T
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestSymmetricSurface:
    def test_zero_coefficients(self):
        b = S.bspline_basis(AgeGrid.from_range(0, 6), 5)
        surf = S.symmetric_surface(b, np.zeros(S.lower_triangle_size(5)))
        np.testing.assert_array_equal(surf, 0.0)

    def test_exact_symmetry(self):
        rng = np.random.default_rng(3)
        b = S.bspline_basis(AgeGrid.from_range(0, 11), 6)
        xi = rng.standard_normal(S.lower_triangle_size(6))
        surf = S.symmetric_surface(b, xi)
        assert np.max(np.abs(surf - surf.T)) == 0.0

    def test_diagonal_matches_direct_evaluation(self):
        rng = np.random.default_rng(4)
        b = S.bspline_basis(AgeGrid.from_range(0, 9), 5)
        xi = rng.standard_normal(S.lower_triangle_size(5))
        Xi = S.expand_symmetric(xi, 5)
        surf = S.symmetric_surface(b, xi)
        for a in range(10):
            direct = float(b.B[a] @ Xi @ b.B[a])
            assert surf[a, a] == pytest.approx(direct, rel=1e-12)

    def test_adjoint_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        b = S.bspline_basis(AgeGrid.from_range(0, 5), 4)
        L = S.lower_triangle_size(4)
        xi = rng.standard_normal(L)
        w = rng.standard_normal((6, 6))  # random linear functional

        def f(v):
            return float((w * S.symmetric_surface(b, v)).sum())

        g = S.symmetric_surface_adjoint(b, w)
        h = 1e-6
        for i in range(L):
            xp, xm = xi.copy(), xi.copy()
            xp[i] += h
            xm[i] -= h
            fd = (f(xp) - f(xm)) / (2 * h)
            assert g[i] == pytest.approx(fd, abs=1e-6)


class TestPenalty:
    def test_positive_semidefinite(self):
        pen = S.build_penalty(7)
        ev = np.linalg.eigvalsh(pen.Q)
        assert ev.min() >= -1e-10 * ev.max()

    def test_annihilates_affine_coefficient_arrays(self):
        M = 6
        pen = S.build_penalty(M)
        i = np.arange(M, dtype=float)
        for arr in (np.ones((M, M)), np.add.outer(i, np.zeros(M)),
                    np.add.outer(np.zeros(M), i), np.outer(i, i)):
            v = arr.ravel()
            assert abs(v @ pen.Q @ v) < 1e-9

    def test_rank(self):
        for M in (5, 8, 12):
            pen = S.build_penalty(M)
            assert pen.rank == M * M - 4
            sym = S.symmetric_penalty(pen)
            assert sym.rank == M * (M + 1) // 2 - 3

    def test_symmetric_penalty_matches_full_on_symmetric_input(self):
        rng = np.random.default_rng(6)
        M = 5
        pen = S.build_penalty(M)
        sym = S.symmetric_penalty(pen)
        xi = rng.standard_normal(S.lower_triangle_size(M))
        Xi = S.expand_symmetric(xi, M)
        full_quad = Xi.ravel() @ pen.Q @ Xi.ravel()
        assert xi @ sym.Q @ xi == pytest.approx(full_quad, rel=1e-12)


class TestIgmrfLogpdf:
    def test_null_space_invariance(self):
        pen = S.build_penalty(5)
        c = np.ones(25) * 3.7
        assert S.igmrf_logpdf(c, 2.0, pen) == pytest.approx(
            S.igmrf_logpdf(0 * c, 2.0, pen), rel=1e-12)

    def test_tau_doubling(self):
        rng = np.random.default_rng(7)
        pen = S.build_penalty(5)
        xi = rng.standard_normal(25)
        quad = xi @ pen.Q @ xi
        base = S.igmrf_logpdf(xi, 1.5, pen)
        doubled = S.igmrf_logpdf(xi, 3.0, pen)
        expect = 0.5 * pen.rank * np.log(2.0) - 0.5 * 1.5 * quad
        assert doubled - base == pytest.approx(expect, rel=1e-10)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(8)
        pen = S.build_penalty(4)
        xi = rng.standard_normal(16)
        tau = 0.7
        g = S.igmrf_grad_xi(xi, tau, pen)
        h = 1e-6
        for i in range(16):
            xp, xm = xi.copy(), xi.copy()
            xp[i] += h
            xm[i] -= h
            fd = (S.igmrf_logpdf(xp, tau, pen) - S.igmrf_logpdf(xm, tau, pen)) / (2 * h)
            denom = max(abs(fd), 1e-6)
            assert abs(g[i] - fd) / denom < 1e-6

    def test_rejects_nonpositive_tau(self):
        pen = S.build_penalty(4)
        with pytest.raises(ValueError):
            S.igmrf_logpdf(np.zeros(16), 0.0, pen)
