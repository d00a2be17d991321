"""Prediction of complete intensities from partially observed fits.

With feature information only on respondents, the total contacts between
two (stratum, age) groups form the inner cells of a contingency table
whose margins the partial model identifies.  Sharp cell bounds follow
from the margins; a truncated Dirichlet prior centered on demographic
proportions, sampled with a conditional stick-breaking scheme, produces
attributable-fraction draws that respect the bounds.  Tables are
completed sequentially (tracking remaining column mass) so that every
draw satisfies reciprocity exactly and marginalizes back to the partial
intensities; reciprocally derived fractions then land inside their own
bounds automatically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, betaincinv

from .domain import DataError, PopulationTable
from .inference import PosteriorSamples

_FEAS_TOL = 1e-9


class DegenerateIntervalError(ValueError):
    """Truncated interval carries no usable probability mass."""


@dataclass(frozen=True)
class MixingBounds:
    """Bounds on attributable fractions eta[k, l, a, b], fiber over l."""

    lower: np.ndarray  # (K, K, A, A)
    upper: np.ndarray

    def __post_init__(self):
        lo, up = self.lower, self.upper
        if np.any(lo < -1e-12) or np.any(up > 1 + 1e-12) or np.any(lo > up + 1e-12):
            raise DataError("bounds must satisfy 0 <= lower <= upper <= 1")
        lsum = lo.sum(axis=1)
        usum = up.sum(axis=1)
        if np.any(lsum > 1 + _FEAS_TOL) or np.any(usum < 1 - _FEAS_TOL):
            raise DataError("infeasible bounds: fiber sums must bracket 1")


@dataclass(frozen=True)
class AttributableFractions:
    """eta[k, l, a, b] with unit fiber sums over the target stratum l."""

    eta: np.ndarray

    def __post_init__(self):
        if np.any(self.eta < -1e-12):
            raise DataError("attributable fractions must be nonnegative")
        if np.max(np.abs(self.eta.sum(axis=1) - 1.0)) > 1e-12:
            raise DataError("attributable fractions must sum to one per fiber")


def mixing_bounds(z_margins: np.ndarray, rel_tol: float = 1e-9,
                  rebalance: bool = True) -> MixingBounds:
    """Sharp bounds on eta from expected contact-total margins.

    ``z_margins[k, a, b]`` is the expected total contacts from (k, a) to
    age b.  Global balance sum_k Z[k, a, b] == sum_l Z[l, b, a] is
    required (it holds for any consistent model fit); Monte-Carlo noise
    within ``rel_tol`` is absorbed by symmetric proportional rescaling of
    the two sides toward their geometric mean.
    """
    Z = np.asarray(z_margins, dtype=float)
    if Z.ndim != 3 or Z.shape[1] != Z.shape[2]:
        raise DataError("z_margins must be (K, A, A)")
    if np.any(Z <= 0):
        raise DataError("margins must be strictly positive")
    T = Z.sum(axis=0)
    imbalance = np.abs(T - T.T) / np.maximum(T, T.T)
    if np.max(imbalance) > rel_tol:
        a, b = np.unravel_index(int(np.argmax(imbalance)), T.shape)
        raise DataError(f"margin balance violated at ages ({a},{b}): "
                        f"relative imbalance {imbalance[a, b]:.3e}")
    if rebalance:
        g = np.sqrt(T * T.T)
        Z = Z * (g / T)[None, :, :]
        T = g
    rev = Z.transpose(0, 2, 1)                       # rev[l, a, b] = Z[l, b, a]
    denom = Z[:, None, :, :]                         # Z[k, a, b]
    others = (T[None, :, :] - Z)[:, None, :, :]      # sum_{t != k} Z[t, a, b]
    upper = np.minimum(1.0, rev[None, :, :, :] / denom)
    lower = np.maximum(0.0, (rev[None, :, :, :] - others) / denom)
    lower = np.clip(lower, 0.0, 1.0)
    upper = np.clip(upper, 0.0, 1.0)
    return MixingBounds(lower, upper)


def truncated_beta_sample(a1, a2, l, u, w):
    """Inverse-CDF draw from Beta(a1, a2) restricted to [l, u].

    ``w`` is a uniform variate on [0, 1]; arrays broadcast.  Rejects
    intervals whose CDF mass is numerically zero.
    """
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(a1 <= 0) or np.any(a2 <= 0):
        raise ValueError("shape parameters must be positive")
    if np.any(l < 0) or np.any(u > 1) or np.any(l >= u):
        raise ValueError("need 0 <= l < u <= 1")
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("w must lie in [0, 1]")
    Fl = betainc(a1, a2, l)
    Fu = betainc(a1, a2, u)
    gap = Fu - Fl
    if np.any(gap < 1e-300):
        raise DegenerateIntervalError("truncated interval has no probability mass")
    x = betaincinv(a1, a2, Fl + w * gap)
    return np.clip(x, l, u)


def _sample_fibers(alpha: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                   uniforms: np.ndarray):
    """Vectorized conditional sampler for batches of truncated simplex fibers.

    Shapes: (B, K) bounds and concentration, (B, K-1) uniforms.  Components
    K-2 .. 0 are drawn as truncated Betas of the remaining mass with
    dynamically adjusted bounds; the last component is the complement.
    Returns (eta, ok); fibers whose dynamic interval collapses are flagged
    instead of raising, so callers can retry with fresh uniforms.
    """
    B, K = alpha.shape
    eta = np.zeros((B, K))
    ok = np.ones(B, dtype=bool)
    if K == 1:
        eta[:, 0] = 1.0
        return eta, ok
    tail = np.zeros(B)          # sum of already-sampled components
    csum_l = np.cumsum(lower, axis=1)
    csum_u = np.cumsum(upper, axis=1)
    csum_a = np.cumsum(alpha, axis=1)
    for i in range(K - 2, -1, -1):
        R = 1.0 - tail
        ok &= R > -1e-12
        Rc = np.maximum(R, 1e-300)
        # bounds from this component and from what the rest must absorb
        head_u = (csum_u[:, i] - upper[:, i]) + upper[:, K - 1]
        head_l = (csum_l[:, i] - lower[:, i]) + lower[:, K - 1]
        lt = np.maximum(lower[:, i] / Rc, 1.0 - head_u / Rc)
        ut = np.minimum(upper[:, i] / Rc, 1.0 - head_l / Rc)
        lt = np.clip(lt, 0.0, 1.0)
        ut = np.clip(ut, 0.0, 1.0)
        ok &= lt <= ut + 1e-9
        gap_mask = ut - lt > 1e-13
        a1 = alpha[:, i]
        a2 = (csum_a[:, i] - alpha[:, i]) + alpha[:, K - 1]
        V = np.where(gap_mask, 0.0, np.clip(lt, 0.0, 1.0))
        if np.any(gap_mask):
            li = lt[gap_mask]
            ui = ut[gap_mask]
            Fl = betainc(a1[gap_mask], a2[gap_mask], li)
            Fu = betainc(a1[gap_mask], a2[gap_mask], ui)
            cgap = Fu - Fl
            dead = cgap < 1e-300
            tgt = Fl + uniforms[gap_mask, i] * cgap
            x = np.where(dead, li, betaincinv(a1[gap_mask], a2[gap_mask],
                                              np.clip(tgt, 0.0, 1.0)))
            V[gap_mask] = np.clip(x, li, ui)
        eta[:, i] = R * V
        tail += eta[:, i]
    eta[:, K - 1] = 1.0 - tail
    ok &= eta[:, K - 1] >= lower[:, K - 1] - 1e-9
    ok &= eta[:, K - 1] <= upper[:, K - 1] + 1e-9
    eta[:, K - 1] = np.clip(eta[:, K - 1], 0.0, 1.0)
    return eta, ok


def truncated_dirichlet_sample(alpha_vec: np.ndarray, lower: np.ndarray,
                               upper: np.ndarray, rng: np.random.Generator,
                               max_retries: int = 100) -> np.ndarray:
    """One fiber from a bound-truncated Dirichlet distribution.

    Bounds must be jointly feasible (sum of lowers <= 1 <= sum of uppers).
    Numerically collapsed intervals mid-sequence trigger a bounded number
    of retries before raising.
    """
    alpha_vec = np.atleast_1d(np.asarray(alpha_vec, dtype=float))
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if np.any(alpha_vec <= 0):
        raise ValueError("concentration must be positive")
    if lower.sum() > 1 + _FEAS_TOL or upper.sum() < 1 - _FEAS_TOL:
        raise DataError("infeasible bounds: need sum(lower) <= 1 <= sum(upper)")
    K = alpha_vec.size
    for _ in range(max_retries):
        uniforms = rng.uniform(size=(1, max(K - 1, 1)))
        eta, ok = _sample_fibers(alpha_vec[None, :], lower[None, :],
                                 upper[None, :], uniforms)
        if ok[0]:
            return eta[0]
    raise DegenerateIntervalError(
        f"failed to draw a feasible fiber after {max_retries} retries")


def _try_offdiag_tables(r, c, alpha_rows, lower, upper, rng):
    """One sequential pass completing a batch of K x K tables.

    Shapes: r, c (B, K) margins; alpha_rows (B, K); lower/upper (B, K, K)
    per-row sharp bounds.  Rows are truncated Dirichlet fibers whose
    bounds combine the sharp margin bounds with the remaining column
    mass; the last row is the leftover column mass renormalized to its
    row sum, so both margins hold exactly.  Returns (tables, ok).
    """
    B, K = r.shape
    tables = np.zeros((B, K, K))
    ok = np.ones(B, dtype=bool)
    c_rem = c.copy()
    for k in range(K):
        if k == K - 1:
            total = c_rem.sum(axis=1, keepdims=True)
            ok &= total[:, 0] > 0
            tables[:, k, :] = r[:, k:k + 1] * (c_rem / np.maximum(total, 1e-300))
            break
        tail_r = r[:, k + 1:].sum(axis=1, keepdims=True)
        rk = r[:, k:k + 1]
        up = np.minimum(upper[:, k, :] * rk, c_rem) / rk
        lo = np.maximum(lower[:, k, :] * rk, c_rem - tail_r) / rk
        lo = np.clip(lo, 0.0, 1.0)
        up = np.clip(up, 0.0, 1.0)
        lo = np.minimum(lo, up)
        uniforms = rng.uniform(size=(B, max(K - 1, 1)))
        eta_row, row_ok = _sample_fibers(alpha_rows, lo, up, uniforms)
        ok &= row_ok
        tables[:, k, :] = rk * eta_row
        c_rem = np.maximum(c_rem - tables[:, k, :], 0.0)
    return tables, ok


def _try_diag_tables(r, alpha_rows, lower, upper, rng):
    """One sequential pass completing a batch of symmetric tables.

    Earlier rows fix the leading cells of later rows through symmetry;
    each row's free tail is a conditional truncated Dirichlet scaled by
    the remaining row mass.  Returns (tables, ok).
    """
    B, K = r.shape
    tables = np.zeros((B, K, K))
    ok = np.ones(B, dtype=bool)
    c_rem = r.copy()
    for k in range(K):
        fixed = tables[:, :k, k].sum(axis=1)    # symmetric cells from earlier rows
        rem = r[:, k] - fixed
        ok &= rem >= -1e-7 * r[:, k]
        rem = np.maximum(rem, 0.0)
        tables[:, k, :k] = tables[:, :k, k]
        if k == K - 1:
            tables[:, k, k] = rem
            break
        rem_c = np.maximum(rem, 1e-300)[:, None]
        up = np.minimum(upper[:, k, k:] * r[:, k:k + 1], c_rem[:, k:]) / rem_c
        lo = np.maximum(lower[:, k, k:] * r[:, k:k + 1], 0.0) / rem_c
        lo = np.clip(lo, 0.0, 1.0)
        up = np.clip(up, 0.0, 1.0)
        lo = np.minimum(lo, up)
        uniforms = rng.uniform(size=(B, max(K - k - 1, 1)))
        sub, row_ok = _sample_fibers(alpha_rows[:, k:], lo, up, uniforms)
        ok &= row_ok
        tables[:, k, k:] = rem[:, None] * sub
        c_rem = np.maximum(c_rem - tables[:, k, :], 0.0)
    return tables, ok


def _complete_tables(try_once, n_tables: int, max_retries: int = 50):
    """Run a table-completion pass with whole-table retries on collapse."""
    out = None
    pending = np.arange(n_tables)
    for _ in range(max_retries):
        tables, ok = try_once(pending)
        if out is None:
            out = tables
            pending = pending[~ok]
        else:
            out[pending[ok]] = tables[ok]
            pending = pending[~ok]
        if pending.size == 0:
            return out
    raise DegenerateIntervalError(
        f"{pending.size} tables still infeasible after {max_retries} retries")


@dataclass
class PredictionResult:
    """Per-draw attributable fractions and predicted complete intensities."""

    eta: np.ndarray         # (n, K, K, A, A)
    m: np.ndarray           # (n, K, K, A, A)
    bounds_mean: MixingBounds

    @property
    def n_draws(self) -> int:
        return self.eta.shape[0]

    def fractions(self, i: int) -> AttributableFractions:
        """One draw as a validated attributable-fraction tensor."""
        return AttributableFractions(self.eta[i])


def predict_complete(posterior: PosteriorSamples, pop: PopulationTable,
                     alpha: float = 10.0, rng: np.random.Generator | None = None,
                     check_tol: float = 1e-9) -> PredictionResult:
    """Predict complete intensities from a partial-mode posterior.

    Per draw: margins Z[k, a, b] = m[k, a, b] * P^k_a are rebalanced and
    bounded; fibers are sampled for age pairs a >= b and the a < b half is
    the reciprocal image of the same tables, so Z-reciprocity holds
    exactly and sum_l m[k, l, a, b] recovers m[k, a, b] to float precision.
    The concentration ``alpha`` scales the demographic-proportion prior
    mean; derived fractions are asserted to land inside their own bounds.
    """
    if posterior.mode != "partial":
        raise DataError("predict_complete needs a partial-mode posterior")
    if rng is None:
        rng = np.random.default_rng(0)
    n, K, A, _ = posterior.m.shape
    prop_b = pop.proportions  # (K, A) target proportions over contact age
    eta_out = np.empty((n, K, K, A, A))
    m_out = np.empty((n, K, K, A, A))

    if K == 1:
        eta_out[:] = 1.0
        m_out = posterior.m[:, :, None, :, :].copy()
        zmean = posterior.m.mean(axis=0) * pop.counts[:, :, None]
        return PredictionResult(eta_out, m_out, mixing_bounds(zmean))

    iu = [(a, b) for a in range(A) for b in range(A) if a > b]
    pairs = np.array(iu, dtype=int).reshape(-1, 2)
    mean_Z = posterior.m.mean(axis=0) * pop.counts[:, :, None]
    bounds_mean = mixing_bounds(mean_Z)

    for d in range(n):
        Z = posterior.m[d] * pop.counts[:, :, None]
        b = mixing_bounds(Z)
        T = Z.sum(axis=0)
        g = np.sqrt(T * T.T)
        Zs = Z * (g / T)[None, :, :]

        eta = np.empty((K, K, A, A))
        if pairs.size:
            pa, pb = pairs[:, 0], pairs[:, 1]
            r = Zs[:, pa, pb].T           # (B, K)
            c = Zs[:, pb, pa].T
            alpha_rows = alpha * prop_b[:, pb].T
            lo = b.lower[:, :, pa, pb].transpose(2, 0, 1)
            up = b.upper[:, :, pa, pb].transpose(2, 0, 1)
            tables = _complete_tables(
                lambda idx: _try_offdiag_tables(r[idx], c[idx], alpha_rows[idx],
                                                lo[idx], up[idx], rng),
                len(pairs))
            eta[:, :, pa, pb] = (tables / r[:, :, None]).transpose(1, 2, 0)
            # reciprocal image: Z[l, k, b, a] = Z[k, l, a, b]
            eta[:, :, pb, pa] = (tables.transpose(0, 2, 1) / c[:, :, None]).transpose(1, 2, 0)

        diag = np.arange(A)
        r_d = Zs[:, diag, diag].T         # (A, K)
        alpha_d = alpha * prop_b[:, diag].T
        lo_d = b.lower[:, :, diag, diag].transpose(2, 0, 1)
        up_d = b.upper[:, :, diag, diag].transpose(2, 0, 1)
        tables_d = _complete_tables(
            lambda idx: _try_diag_tables(r_d[idx], alpha_d[idx], lo_d[idx],
                                         up_d[idx], rng),
            A)
        eta[:, :, diag, diag] = (tables_d / r_d[:, :, None]).transpose(1, 2, 0)

        if np.any(eta < b.lower - check_tol) or np.any(eta > b.upper + check_tol):
            worst = max(float(np.max(b.lower - eta)), float(np.max(eta - b.upper)))
            raise AssertionError(f"derived fractions violate their bounds by {worst:.3e}")
        eta_out[d] = eta
        m_out[d] = posterior.m[d][:, None, :, :] * eta
    return PredictionResult(eta_out, m_out, bounds_mean)


def ngm_r0(m_complete: np.ndarray, beta_rates, durations: np.ndarray,
           susceptibles: np.ndarray, pop: PopulationTable,
           max_iter: int = 100000, tol: float = 1e-10):
    """Next-generation matrix (recipient-first layout) and its dominant eigenvalue.

    NGM[(l, b), (k, a)] = beta[k, l, a, b] * m[k, l, a, b] * D[k, a]
    * S[l, b] / P[l, b]; the reproduction number is found by power
    iteration on the nonnegative matrix.
    """
    m = np.asarray(m_complete, dtype=float)
    K, _, A, _ = m.shape
    beta = np.broadcast_to(np.asarray(beta_rates, dtype=float), m.shape)
    D = np.asarray(durations, dtype=float)
    S = np.asarray(susceptibles, dtype=float)
    P = pop.counts
    if np.any(S > P + 1e-9):
        raise DataError("susceptibles cannot exceed the population")
    if np.any(D <= 0) or np.any(S <= 0):
        raise DataError("durations and susceptibles must be positive")
    # element (l, b, k, a)
    ngm = (beta * m * D[:, None, :, None] *
           (S / P)[None, :, None, :]).transpose(1, 3, 0, 2)
    ngm = ngm.reshape(K * A, K * A)

    v = np.full(K * A, 1.0 / np.sqrt(K * A))
    lam = 0.0
    for _ in range(max_iter):
        w = ngm @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return ngm, 0.0
        v_new = w / norm
        lam_new = float(v_new @ (ngm @ v_new))
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-30):
            return ngm, lam_new
        v, lam = v_new, lam_new
    raise RuntimeError(f"power iteration did not converge in {max_iter} iterations")
