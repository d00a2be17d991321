"""Penalized tensor-product spline machinery.

Cubic B-spline bases on equally spaced clamped knots, Kronecker-product
design matrices, second-order difference penalties, and the improper
IGMRF log-density shared by every smooth prior in the model.  Symmetric
age-age surfaces are parameterized by the lower triangle of their
coefficient matrix and mirrored, so symmetry is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .domain import AgeGrid

_DEGREE = 3  # cubic


@dataclass(frozen=True)
class SplineBasis:
    """Basis evaluation matrix at the grid ages, rows summing to one."""

    knots: np.ndarray
    M: int
    B: np.ndarray  # (A, M)

    @property
    def A(self) -> int:
        return self.B.shape[0]


def bspline_basis(grid: AgeGrid, M: int) -> SplineBasis:
    """Cubic basis with M functions on clamped, equally spaced knots.

    Boundary knots repeat degree+1 times; the penalty, not knot placement,
    controls smoothness, so interior knots are simply equally spaced over
    [min age, max age].
    """
    if M < _DEGREE + 1:
        raise ValueError(f"need at least {_DEGREE + 1} basis functions, got {M}")
    x = grid.ages.astype(float)
    lo, hi = x[0], x[-1]
    interior = np.linspace(lo, hi, M - _DEGREE + 1)[1:-1]
    knots = np.concatenate([[lo] * (_DEGREE + 1), interior, [hi] * (_DEGREE + 1)])
    B = BSpline.design_matrix(x, knots, _DEGREE, extrapolate=False).toarray()
    knots.setflags(write=False)
    B.setflags(write=False)
    return SplineBasis(knots, M, B)


def tensor_design(b1: SplineBasis, b2: SplineBasis) -> np.ndarray:
    """Kronecker product of marginal bases, (A^2, M1*M2).

    Row order is row-major over (a, b), so for coefficients Xi (M1 x M2),
    (design @ vec(Xi)).reshape(A, A) == B1 @ Xi @ B2.T.
    """
    return np.kron(b1.B, b2.B)


def lower_triangle_size(M: int) -> int:
    return M * (M + 1) // 2


def expand_symmetric(xi_lower: np.ndarray, M: int) -> np.ndarray:
    """Lower-triangle coefficient vector -> full symmetric M x M matrix."""
    xi_lower = np.asarray(xi_lower, dtype=float)
    if xi_lower.shape != (lower_triangle_size(M),):
        raise ValueError(f"expected {lower_triangle_size(M)} coefficients, got {xi_lower.shape}")
    out = np.zeros((M, M))
    il = np.tril_indices(M)
    out[il] = xi_lower
    out = out + np.tril(out, -1).T
    return out


def fold_symmetric(grad_full: np.ndarray) -> np.ndarray:
    """Adjoint of expand_symmetric: fold an M x M gradient onto the lower triangle."""
    M = grad_full.shape[0]
    folded = grad_full + grad_full.T
    folded[np.diag_indices(M)] = np.diag(grad_full)
    return folded[np.tril_indices(M)]


def mirror_lower(G: np.ndarray) -> np.ndarray:
    """Copy the lower triangle onto the upper one; symmetry holds bitwise."""
    return np.tril(G) + np.tril(G, -1).T


def mirror_lower_adjoint(grad: np.ndarray) -> np.ndarray:
    """Adjoint of mirror_lower: route both mirrored copies back to the source."""
    g = np.tril(grad + grad.T, -1)
    g[np.diag_indices(grad.shape[0])] = np.diag(grad)
    return g


def symmetric_surface(basis: SplineBasis, xi_lower: np.ndarray) -> np.ndarray:
    """Evaluate a symmetric A x A surface from lower-triangle coefficients.

    The surface is computed on age pairs a >= b and mirrored, so
    f(a, b) == f(b, a) holds exactly, not merely to rounding.
    """
    Xi = expand_symmetric(xi_lower, basis.M)
    G = basis.B @ Xi @ basis.B.T
    return mirror_lower(G)


def symmetric_surface_adjoint(basis: SplineBasis, grad_surface: np.ndarray) -> np.ndarray:
    """Gradient of a scalar w.r.t. xi_lower given its gradient w.r.t. the surface."""
    gG = mirror_lower_adjoint(grad_surface)
    gXi = basis.B.T @ gG @ basis.B
    return fold_symmetric(gXi)


def second_difference_matrix(M: int) -> np.ndarray:
    """(M-2) x M second-order difference operator."""
    D = np.zeros((M - 2, M))
    for i in range(M - 2):
        D[i, i:i + 3] = (1.0, -2.0, 1.0)
    return D


def _numerical_rank(Q: np.ndarray) -> int:
    ev = np.linalg.eigvalsh(Q)
    tol = Q.shape[0] * np.finfo(float).eps * max(ev.max(), 0.0)
    return int(np.sum(ev > tol))


@dataclass(frozen=True)
class PenaltyOperator:
    """Kronecker-sum second-difference penalty on tensor-product coefficients.

    Q = Q0 (+) Q0 is positive semidefinite with a 4-dimensional null space
    (surfaces affine in each coefficient index), so rank = M^2 - 4.  The
    rank, not the dimension, sets the tau-power of the improper density.
    """

    D: np.ndarray
    Q0: np.ndarray
    Q: np.ndarray
    rank: int


def build_penalty(M: int) -> PenaltyOperator:
    D = second_difference_matrix(M)
    Q0 = D.T @ D
    eye = np.eye(M)
    Q = np.kron(Q0, eye) + np.kron(eye, Q0)
    for arr in (D, Q0, Q):
        arr.setflags(write=False)
    return PenaltyOperator(D, Q0, Q, _numerical_rank(Q))


@dataclass(frozen=True)
class SymmetricPenalty:
    """Penalty restricted to symmetric coefficient matrices.

    Q_sym = L^T Q L with L the 0/1 map from lower-triangle coordinates to
    the full symmetrized vector.  The null space drops to {1, i+j, i*j},
    so rank = M(M+1)/2 - 3.
    """

    Q: np.ndarray
    rank: int
    M: int


def symmetric_penalty(pen: PenaltyOperator) -> SymmetricPenalty:
    M = pen.Q0.shape[0]
    Mt = lower_triangle_size(M)
    L = np.zeros((M * M, Mt))
    low_index = {}
    for idx, (i, j) in enumerate(zip(*np.tril_indices(M))):
        low_index[(int(i), int(j))] = idx
    for i in range(M):
        for j in range(M):
            src = low_index[(max(i, j), min(i, j))]
            L[i * M + j, src] = 1.0
    Q = L.T @ pen.Q @ L
    Q.setflags(write=False)
    return SymmetricPenalty(Q, _numerical_rank(Q), M)


def igmrf_logpdf(xi: np.ndarray, tau: float, pen) -> float:
    """Improper IGMRF log density up to a tau-independent constant.

    0.5 * rank * log(tau) - 0.5 * tau * xi' Q xi.  ``pen`` is any object
    with ``Q`` and ``rank`` attributes (full or symmetric penalty).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    quad = float(xi @ pen.Q @ xi)
    return 0.5 * pen.rank * np.log(tau) - 0.5 * tau * quad


def igmrf_grad_xi(xi: np.ndarray, tau: float, pen) -> np.ndarray:
    """d logpdf / d xi = -tau * Q xi."""
    return -tau * (pen.Q @ xi)
