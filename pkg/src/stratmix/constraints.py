"""Structural constraint machinery for stratified contact tensors.

A stratified modifier tensor has one fiber of length K^2 (complete mode)
or K (partial mode) at every age pair (a, b).  Reciprocity ties the fiber
at (a, b) to the fiber at (b, a) through the transpose permutation of the
(source, target) pair index; consistency requires population-weighted
fibers to sum to one, which the fiber-wise softmax enforces by
construction.  Multi-feature tensors compose additively on the stratum
mode (a Kronecker sum), which preserves reciprocity.

Pair-index convention, fixed project-wide: (k, l) -> k * K + l (row-major,
0-based).  The transpose permutation is defined by its swap semantics
pi((k, l)) = (l, k) under this pairing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import DataError, PopulationTable


@dataclass(frozen=True)
class TransposePermutation:
    """Permutation of row-major (k, l) pair indices swapping k and l."""

    K: int
    perm: np.ndarray  # length K^2

    def apply(self, x: np.ndarray, axis: int = 0) -> np.ndarray:
        return np.take(x, self.perm, axis=axis)


def build_transpose_permutation(K: int) -> TransposePermutation:
    """Involution pi with pi(k * K + l) = l * K + k; identity for K = 1."""
    if K < 1:
        raise ValueError("K must be >= 1")
    k, l = np.divmod(np.arange(K * K), K)
    perm = l * K + k
    perm.setflags(write=False)
    return TransposePermutation(K, perm)


@dataclass(frozen=True)
class ConstrainedTensor:
    """Free parameters of a reciprocal stratum tensor.

    ``free_between[(k, l)]`` for k < l is a full A x A matrix; the (l, k)
    slice is its transpose.  ``free_within[k]`` is an A x A block whose
    strict upper triangle is ignored; the slice is mirrored symmetric.
    """

    K: int
    A: int
    free_between: dict[tuple[int, int], np.ndarray]
    free_within: dict[int, np.ndarray]


def materialize(ct: ConstrainedTensor) -> np.ndarray:
    """Expand free blocks into the full (K^2, A, A) tensor.

    The upper blocks are copies of the transposed lower blocks, so the
    reciprocity identity Omega[(k,l), a, b] == Omega[(l,k), b, a] holds
    bitwise, not merely to tolerance.
    """
    K, A = ct.K, ct.A
    out = np.empty((K * K, A, A))
    for k in range(K):
        blk = ct.free_within.get(k)
        if blk is None:
            raise DataError(f"missing within-stratum block for k={k}")
        blk = np.asarray(blk, dtype=float)
        sym = np.tril(blk) + np.tril(blk, -1).T
        out[k * K + k] = sym
        for l in range(k + 1, K):
            b = ct.free_between.get((k, l))
            if b is None:
                raise DataError(f"missing between-strata block for (k,l)=({k},{l})")
            b = np.asarray(b, dtype=float)
            out[k * K + l] = b
            out[l * K + k] = b.T
    return out


def reciprocity_residual(omega: np.ndarray, perm: TransposePermutation) -> float:
    """max |Omega[i, a, b] - Omega[pi(i), b, a]| over all entries."""
    swapped = perm.apply(omega, axis=0).swapaxes(-1, -2)
    return float(np.max(np.abs(omega - swapped)))


@dataclass(frozen=True)
class ProportionTensor:
    """Population proportion products, the weights of the consistency sum.

    Complete mode: s[(k,l), a, b] = (P^k_a / P_a)(P^l_b / P_b), shape
    (K^2, A, A).  Partial mode: s[k, a, b] = P^k_a / P_a, shape (K, A, A).
    Each fiber over the stratum axis sums to one.
    """

    s: np.ndarray
    mode: str

    def __post_init__(self):
        total = self.s.sum(axis=0)
        if np.max(np.abs(total - 1.0)) > 1e-12:
            raise DataError("proportion fibers must sum to 1")


def proportion_tensor(pop: PopulationTable, mode: str) -> ProportionTensor:
    """Build the proportion tensor for a population table."""
    prop = pop.proportions  # (K, A)
    K, A = prop.shape
    if mode == "complete":
        s = prop[:, None, :, None] * prop[None, :, None, :]  # (K, K, A, A)
        s = s.reshape(K * K, A, A)
    elif mode == "partial":
        s = np.broadcast_to(prop[:, :, None], (K, A, A)).copy()
    else:
        raise DataError(f"unknown mode {mode!r}")
    return ProportionTensor(s, mode)


def softmax_fiber(omega: np.ndarray, prop: ProportionTensor) -> np.ndarray:
    """Map unconstrained fibers to modifiers: delta = softmax(omega) / s.

    Softmax normalizes each stratum fiber onto the simplex (with
    max-subtraction for overflow safety); dividing by the proportion
    weights yields modifiers satisfying sum(delta * s) = 1 per age pair.
    """
    s = prop.s
    if omega.shape != s.shape:
        raise DataError(f"omega shape {omega.shape} != proportions shape {s.shape}")
    if np.any(s <= 0):
        i, a, b = np.unravel_index(int(np.flatnonzero(s <= 0)[0]), s.shape)
        raise DataError(f"zero population proportion at fiber index {i}, ages ({a},{b})")
    z = omega - omega.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)
    return p / s


def log_softmax_fiber(omega: np.ndarray):
    """(log p, p) of the fiber softmax; shared by model internals."""
    z = omega - omega.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0, keepdims=True))
    logp = z - lse
    return logp, np.exp(logp)


def clr_inverse_center(prop: ProportionTensor) -> np.ndarray:
    """Fiber-wise centered log of the proportions (inverse softmax).

    Using the result as the anchor of the latent tensor makes the modifiers
    evaluate to exactly one when every smoothing term is zero.
    """
    s = prop.s
    if np.any(s <= 0):
        raise DataError("proportions must be strictly positive")
    logs = np.log(s)
    return logs - logs.mean(axis=0, keepdims=True)


def _component_sizes(components: list[np.ndarray]) -> tuple[int, ...]:
    sizes = []
    for c in components:
        K = int(round(np.sqrt(c.shape[0])))
        if K * K != c.shape[0]:
            raise DataError(f"component first mode {c.shape[0]} is not a squared stratum count")
        sizes.append(K)
    return tuple(sizes)


def kronecker_sum_mode1(components: list[np.ndarray]) -> np.ndarray:
    """Compose per-feature pair tensors additively on the stratum mode.

    Each component has shape (K_j^2, A, A) with pair index k_j * K_j + l_j.
    The output is (K*^2, A, A) under the composite pairing s * K* + t, with
    value at (s, t) equal to sum_j component_j[(k_j(s), k_j(t))].  Additive
    composition on the latent scale preserves reciprocity: the induced
    transpose permutation is exactly ``build_transpose_permutation(K*)``.
    """
    if not components:
        raise DataError("need at least one component")
    comps = [np.asarray(c, dtype=float) for c in components]
    A = comps[0].shape[-1]
    for c in comps:
        if c.ndim != 3 or c.shape[-2:] != (A, A):
            raise DataError("components must be (K_j^2, A, A) on a shared age grid")
    if len(comps) == 1:
        return comps[0].copy()
    sizes = _component_sizes(comps)
    J = len(comps)
    out = np.zeros(sizes + sizes + (A, A))
    for j, (c, K) in enumerate(zip(comps, sizes)):
        shape = [1] * (2 * J) + [A, A]
        shape[j] = K
        shape[J + j] = K
        out += c.reshape(shape)
    K_star = int(np.prod(sizes))
    return out.reshape(K_star * K_star, A, A)


def composite_pair_maps(sizes: tuple[int, ...]) -> list[np.ndarray]:
    """Per feature j, map composite pair index (s, t) -> k_j(s) * K_j + k_j(t).

    Used by tests for exhaustive index checks and by gradient code to
    scatter through the Kronecker sum.
    """
    Ks = tuple(sizes)
    K_star = 1
    for K in Ks:
        K_star *= K
    pair = np.arange(K_star * K_star)
    s, t = np.divmod(pair, K_star)
    maps = []
    for j in range(len(Ks)):
        div = 1
        for K in Ks[j + 1:]:
            div *= K
        kj = (s // div) % Ks[j]
        lj = (t // div) % Ks[j]
        maps.append(kj * Ks[j] + lj)
    return maps


@dataclass(frozen=True)
class RankCondition:
    rank: int
    feasible_nontrivial: bool
    n_columns: int


def rank_condition(pop: PopulationTable, mode: str) -> RankCondition:
    """Numerical rank of the consistency system for age-constant modifiers.

    Builds S (A^2 x K*^2, complete) or S' (A x K*, partial) of population
    proportion products and reports whether non-trivial age-constant
    modifiers exist (rank deficiency).  Threshold: the standard SVD rule
    sigma > max(rows, cols) * eps * sigma_max.
    """
    prop = pop.proportions  # (K, A)
    K, A = prop.shape
    if mode == "complete":
        S = np.einsum("ka,lb->abkl", prop, prop).reshape(A * A, K * K)
    elif mode == "partial":
        S = prop.T.copy()  # (A, K)
    else:
        raise DataError(f"unknown mode {mode!r}")
    sv = np.linalg.svd(S, compute_uv=False)
    tol = max(S.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    return RankCondition(rank, rank < S.shape[1], S.shape[1])


def consistency_residual(delta: np.ndarray, prop: ProportionTensor) -> float:
    """max |sum_i delta_i * s_i - 1| over age pairs."""
    return float(np.max(np.abs((delta * prop.s).sum(axis=0) - 1.0)))


def check_modifier_tensor(delta: np.ndarray, prop: ProportionTensor,
                          perm: TransposePermutation | None = None,
                          tol_consistency: float = 1e-12,
                          tol_reciprocity: float = 1e-12) -> None:
    """Assert consistency (and, in complete mode, reciprocity) of modifiers."""
    res = consistency_residual(delta, prop)
    if res > tol_consistency:
        raise DataError(f"consistency residual {res:.3e} > {tol_consistency}")
    if perm is not None:
        rec = reciprocity_residual(delta, perm)
        if rec > tol_reciprocity:
            raise DataError(f"reciprocity residual {rec:.3e} > {tol_reciprocity}")
