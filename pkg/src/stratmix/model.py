"""Log joint density of the stratified contact model, with exact gradients.

The generative story: a symmetric baseline log rate surface
``log gamma = beta0 + f(a, b)`` (penalized spline), per-feature latent
tensors composed by Kronecker sum and anchored at the centered log
population proportions, a fiber-wise softmax producing modifiers that
satisfy reciprocity and consistency by construction, and a Negative
Binomial likelihood on aggregated survey counts with expected value
``gamma * delta * P_target * N * exp(offset)``.

Gradients are hand-derived adjoints (softmax fibers, Kronecker sums,
spline products, NB terms via digamma); finite differences appear only in
tests.  tau and phi are optimized on the log scale with Jacobian-corrected
priors.  Likelihood terms are computed from ``log mu`` with log-add-exp,
so the log joint stays finite for any finite parameter vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from . import constraints, splines
from .domain import AgeGrid, DataError, PopulationTable, StrataSpace, SurveyTensor


def beta0_center(pop: PopulationTable, mode: str) -> float:
    """Prior center for the intercept: minus the mean log target population.

    Complete mode averages log P^l_b over strata and ages; partial mode
    averages log P_b over ages.  Centering absorbs the scale of the
    population offsets so the spline captures rate structure only.
    """
    if mode == "complete":
        return float(-np.mean(np.log(pop.counts)))
    if mode == "partial":
        return float(-np.mean(np.log(pop.totals)))
    raise DataError(f"unknown mode {mode!r}")


def nb_logpmf(y, mu, phi):
    """Negative Binomial log pmf with mean mu and Var = mu + mu^2 / phi."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0) or phi <= 0:
        raise ValueError("nb_logpmf requires mu > 0 and phi > 0")
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("nb_logpmf requires nonnegative integer counts")
    return (gammaln(y + phi) - gammaln(phi) - gammaln(y + 1)
            + phi * np.log(phi / (phi + mu)) + y * np.log(mu / (phi + mu)))


def nb_sample(mu, phi, rng: np.random.Generator, size=None):
    """Draw Negative Binomial counts via the Gamma-Poisson mixture."""
    lam = rng.gamma(shape=phi, scale=np.asarray(mu, dtype=float) / phi, size=size)
    return rng.poisson(lam)


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions, basis sizes, and prior hyperparameters of one model.

    ``active_features`` selects which features contribute latent tensors;
    inactive ones are held at the proportionate-mixing anchor.  This is
    how candidate models with fewer features are scored on the same
    maximally stratified data.
    """

    mode: str
    space: StrataSpace
    grid: AgeGrid
    M_gamma: int = 15
    M_omega: int = 15
    tau_shape: float = 2.0
    tau_rate: float = 0.01
    beta0_sd: float = 2.5
    phi_rate: float = 1.0
    beta0_center_override: float | None = None
    active_features: tuple[int, ...] | None = None

    def active(self) -> tuple[int, ...]:
        if self.active_features is None:
            return tuple(range(len(self.space.features)))
        return tuple(self.active_features)


@dataclass(frozen=True)
class ParameterVector:
    """Unpacked view of the flat unconstrained parameter vector."""

    beta0: float
    xi_gamma: np.ndarray
    log_tau_gamma: float
    omega_blocks: list[list[np.ndarray]]  # per active feature, per free slice
    log_tau_omega: list[float]
    log_phi: float


class LogJoint:
    """Evaluates the log joint and its gradient for one (spec, data, pop).

    ``likelihood_mask`` optionally restricts the likelihood sum to a cell
    subset (cross-validation); cells with zero respondents are always
    excluded, since their expected count is identically zero.
    """

    def __init__(self, spec: ModelSpec, data: SurveyTensor, pop: PopulationTable,
                 likelihood_mask: np.ndarray | None = None):
        if data.mode != spec.mode:
            raise DataError(f"data mode {data.mode!r} != model mode {spec.mode!r}")
        if data.space.K_star != spec.space.K_star or data.grid.A != spec.grid.A:
            raise DataError("data dimensions do not match model spec")
        self.spec = spec
        self.pop = pop
        self.data = data
        K, A = spec.space.K_star, spec.grid.A
        self.K, self.A = K, A
        self.F = K * K if spec.mode == "complete" else K
        self.sizes = spec.space.sizes

        self.basis_gamma = splines.bspline_basis(spec.grid, spec.M_gamma)
        self.pen_gamma = splines.symmetric_penalty(splines.build_penalty(spec.M_gamma))
        self.basis_omega = splines.bspline_basis(spec.grid, spec.M_omega)
        pen_full = splines.build_penalty(spec.M_omega)
        self.pen_omega_full = pen_full
        self.pen_omega_sym = splines.symmetric_penalty(pen_full)

        self.prop = constraints.proportion_tensor(pop, spec.mode)
        self.W = constraints.clr_inverse_center(self.prop)
        self.log_s = np.log(self.prop.s)

        # flattened observation tensors, (F, A, A)
        if spec.mode == "complete":
            self.Y = data.Y.reshape(self.F, A, A)
            n_src = np.broadcast_to(data.N[:, None, :, None], (K, K, A, A))
            self.n_src = n_src.reshape(self.F, A, A)
            logP = np.log(pop.counts)  # (K, A)
            self.log_p_tgt = np.broadcast_to(
                logP[None, :, None, :], (K, K, A, A)).reshape(self.F, A, A)
        else:
            self.Y = data.Y
            self.n_src = np.broadcast_to(data.N[:, :, None], (K, A, A))
            self.log_p_tgt = np.broadcast_to(
                np.log(pop.totals)[None, None, :], (K, A, A))
        observed = self.n_src > 0
        mask = observed
        if likelihood_mask is not None:
            if likelihood_mask.shape != mask.shape:
                raise DataError(f"likelihood mask shape {likelihood_mask.shape} != {mask.shape}")
            mask = mask & likelihood_mask
        self.mask = mask
        # the exposure offset depends on data presence, not on the mask:
        # held-out cells still carry their respondent counts
        self.log_n_src = np.where(observed,
                                  np.log(np.where(observed, self.n_src, 1.0)), 0.0)
        if data.offsets is not None:
            self.offsets = data.offsets.reshape(self.F, A, A)
        else:
            self.offsets = None

        self.beta0_bar = (spec.beta0_center_override
                          if spec.beta0_center_override is not None
                          else beta0_center(pop, spec.mode))
        self._build_layout()

    # ----------------------------------------------------------------- #
    # parameter layout
    # ----------------------------------------------------------------- #
    def _build_layout(self):
        spec = self.spec
        Lg = splines.lower_triangle_size(spec.M_gamma)
        Mo2 = spec.M_omega ** 2
        Lo = splines.lower_triangle_size(spec.M_omega)
        pos = 0
        self.idx_beta0 = pos; pos += 1
        self.sl_xi_gamma = slice(pos, pos + Lg); pos += Lg
        self.idx_log_tau_gamma = pos; pos += 1
        self.feature_blocks = []   # per active feature: (K_j, [(slice, kind, k, l)])
        self.idx_log_tau_omega = []
        for j in self.spec.active():
            Kj = self.sizes[j]
            blocks = []
            if spec.mode == "complete":
                for k in range(Kj):
                    for l in range(k + 1, Kj):
                        blocks.append((slice(pos, pos + Mo2), "between", k, l))
                        pos += Mo2
                for k in range(Kj):
                    blocks.append((slice(pos, pos + Lo), "within", k, k))
                    pos += Lo
            else:
                for k in range(Kj):
                    blocks.append((slice(pos, pos + Mo2), "full", k, k))
                    pos += Mo2
            self.feature_blocks.append((Kj, blocks))
            self.idx_log_tau_omega.append(pos)
            pos += 1
        self.idx_log_phi = pos; pos += 1
        self.dim = pos

    def unpack(self, theta: np.ndarray) -> ParameterVector:
        blocks = []
        for _, fb in self.feature_blocks:
            blocks.append([theta[sl] for sl, _, _, _ in fb])
        return ParameterVector(
            beta0=float(theta[self.idx_beta0]),
            xi_gamma=theta[self.sl_xi_gamma],
            log_tau_gamma=float(theta[self.idx_log_tau_gamma]),
            omega_blocks=blocks,
            log_tau_omega=[float(theta[i]) for i in self.idx_log_tau_omega],
            log_phi=float(theta[self.idx_log_phi]),
        )

    def init_theta(self) -> np.ndarray:
        """Data-informed starting point: match the global mean count."""
        theta = np.zeros(self.dim)
        scale = np.exp(self.log_p_tgt[self.mask]) * self.n_src[self.mask]
        total_y = self.Y[self.mask].sum()
        theta[self.idx_beta0] = np.log((total_y + 0.5) / max(scale.sum(), 1.0))
        theta[self.idx_log_tau_gamma] = np.log(self.spec.tau_shape / self.spec.tau_rate)
        for i in self.idx_log_tau_omega:
            theta[i] = np.log(self.spec.tau_shape / self.spec.tau_rate)
        theta[self.idx_log_phi] = np.log(2.0)
        return theta

    # ----------------------------------------------------------------- #
    # forward pieces
    # ----------------------------------------------------------------- #
    def _omega_components(self, pv: ParameterVector):
        """Per active feature, the (K_j^2 | K_j, A, A) latent tensor."""
        B = self.basis_omega.B
        comps = []
        for (Kj, blocks), theta_blocks in zip(self.feature_blocks, pv.omega_blocks):
            if self.spec.mode == "complete":
                comp = np.empty((Kj * Kj, self.A, self.A))
                for (_, kind, k, l), xi in zip(blocks, theta_blocks):
                    if kind == "between":
                        Xi = xi.reshape(self.spec.M_omega, self.spec.M_omega)
                        surf = B @ Xi @ B.T
                        comp[k * Kj + l] = surf
                        comp[l * Kj + k] = surf.T
                    else:
                        comp[k * Kj + k] = splines.symmetric_surface(self.basis_omega, xi)
            else:
                comp = np.empty((Kj, self.A, self.A))
                for (_, kind, k, l), xi in zip(blocks, theta_blocks):
                    Xi = xi.reshape(self.spec.M_omega, self.spec.M_omega)
                    comp[k] = B @ Xi @ B.T
            comps.append(comp)
        return comps

    def _compose_omega(self, comps):
        """W + broadcast Kronecker sum of the active components."""
        omega = self.W.copy()
        if not comps:
            return omega
        J = len(self.sizes)
        A = self.A
        active = self.spec.active()
        if self.spec.mode == "complete":
            view = omega.reshape(self.sizes + self.sizes + (A, A))
            for j, comp in zip(active, comps):
                Kj = self.sizes[j]
                shape = [1] * (2 * J) + [A, A]
                shape[j] = Kj
                shape[J + j] = Kj
                view += comp.reshape(Kj, Kj, A, A).reshape(shape)
        else:
            view = omega.reshape(self.sizes + (A, A))
            for j, comp in zip(active, comps):
                Kj = self.sizes[j]
                shape = [1] * J + [A, A]
                shape[j] = Kj
                view += comp.reshape(shape)
        return omega

    def _scatter_omega_grad(self, g_omega):
        """Adjoint of _compose_omega: per-feature component gradients."""
        J = len(self.sizes)
        A = self.A
        active = self.spec.active()
        grads = []
        if self.spec.mode == "complete":
            g = g_omega.reshape(self.sizes + self.sizes + (A, A))
            for j in active:
                Kj = self.sizes[j]
                axes = tuple(ax for ax in range(2 * J) if ax not in (j, J + j))
                # reduction keeps (k_j, l_j, A, A) in that order
                gj = g.sum(axis=axes) if axes else g
                grads.append(gj.reshape(Kj * Kj, A, A))
        else:
            g = g_omega.reshape(self.sizes + (A, A))
            for j in active:
                Kj = self.sizes[j]
                axes = tuple(ax for ax in range(J) if ax != j)
                gj = g.sum(axis=axes) if axes else g
                grads.append(gj.reshape(Kj, A, A))
        return grads

    def _forward(self, theta: np.ndarray):
        pv = self.unpack(theta)
        B = self.basis_gamma.B
        f = splines.symmetric_surface(self.basis_gamma, pv.xi_gamma)
        log_gamma = pv.beta0 + f

        comps = self._omega_components(pv)
        omega = self._compose_omega(comps)
        logp, p = constraints.log_softmax_fiber(omega)
        log_delta = logp - self.log_s

        log_mu = log_gamma[None, :, :] + log_delta + self.log_p_tgt + self.log_n_src
        if self.offsets is not None:
            log_mu = log_mu + self.offsets
        return pv, f, log_gamma, comps, omega, logp, p, log_delta, log_mu

    # ----------------------------------------------------------------- #
    # log joint and gradient
    # ----------------------------------------------------------------- #
    def value_and_grad(self, theta: np.ndarray):
        pv, f, log_gamma, comps, omega, logp, p, log_delta, log_mu = self._forward(theta)
        spec = self.spec
        phi = np.exp(pv.log_phi)
        tau_g = np.exp(pv.log_tau_gamma)
        taus = [np.exp(lt) for lt in pv.log_tau_omega]

        mask = self.mask
        y = self.Y[mask]
        lm = log_mu[mask]
        log_phi = pv.log_phi
        L = np.logaddexp(log_phi, lm)           # log(phi + mu)
        r = np.exp(lm - L)                      # mu / (phi + mu)
        loglik = float(np.sum(gammaln(y + phi) - gammaln(phi) - gammaln(y + 1)
                              + phi * (log_phi - L) + y * (lm - L)))

        # priors
        lp_beta0 = (-0.5 * ((pv.beta0 - self.beta0_bar) / spec.beta0_sd) ** 2
                    - np.log(spec.beta0_sd) - 0.5 * np.log(2 * np.pi))
        lp_gamma = splines.igmrf_logpdf(pv.xi_gamma, tau_g, self.pen_gamma)
        lp_tau_g = self._gamma_prior_log(pv.log_tau_gamma)
        lp_omega = 0.0
        for (_, blocks), theta_blocks, tau in zip(self.feature_blocks, pv.omega_blocks, taus):
            for (sl, kind, k, l), xi in zip(blocks, theta_blocks):
                pen = self.pen_omega_sym if kind == "within" else self.pen_omega_full
                lp_omega += splines.igmrf_logpdf(xi, tau, pen)
        lp_tau_o = sum(self._gamma_prior_log(lt) for lt in pv.log_tau_omega)
        lp_phi = np.log(spec.phi_rate) - spec.phi_rate * phi + pv.log_phi

        total = loglik + lp_beta0 + lp_gamma + lp_tau_g + lp_omega + lp_tau_o + lp_phi
        if not np.isfinite(total):
            parts = dict(loglik=loglik, beta0=lp_beta0, gamma_prior=lp_gamma,
                         tau_gamma=lp_tau_g, omega_prior=lp_omega,
                         tau_omega=lp_tau_o, phi_prior=lp_phi)
            bad = [k for k, v in parts.items() if not np.isfinite(v)]
            raise FloatingPointError(f"non-finite log joint terms: {bad}")

        # ---------------- backward ---------------- #
        grad = np.zeros(self.dim)
        g_logmu_flat = y - (y + phi) * r
        g_logmu = np.zeros_like(log_mu)
        g_logmu[mask] = g_logmu_flat

        # intercept and baseline surface
        grad[self.idx_beta0] = g_logmu_flat.sum() \
            - (pv.beta0 - self.beta0_bar) / spec.beta0_sd ** 2
        g_f = g_logmu.sum(axis=0)
        g_xi_gamma = splines.symmetric_surface_adjoint(self.basis_gamma, g_f)
        g_xi_gamma += splines.igmrf_grad_xi(pv.xi_gamma, tau_g, self.pen_gamma)
        grad[self.sl_xi_gamma] = g_xi_gamma
        quad_g = float(pv.xi_gamma @ self.pen_gamma.Q @ pv.xi_gamma)
        grad[self.idx_log_tau_gamma] = (0.5 * self.pen_gamma.rank - 0.5 * tau_g * quad_g
                                        + self._gamma_prior_grad(pv.log_tau_gamma))

        # softmax fibers: dL/d omega_i = g_i - p_i * sum_i g_i
        colsum = g_logmu.sum(axis=0, keepdims=True)
        g_omega = g_logmu - p * colsum
        g_comps = self._scatter_omega_grad(g_omega)

        Bo = self.basis_omega.B
        for fi, ((Kj, blocks), theta_blocks, tau, lt_idx) in enumerate(
                zip(self.feature_blocks, pv.omega_blocks, taus, self.idx_log_tau_omega)):
            gc = g_comps[fi]
            quad_sum = 0.0
            rank_sum = 0.0
            for (sl, kind, k, l), xi in zip(blocks, theta_blocks):
                if kind == "between":
                    gs = gc[k * Kj + l] + gc[l * Kj + k].T
                    gXi = Bo.T @ gs @ Bo
                    g_block = gXi.ravel()
                    pen = self.pen_omega_full
                elif kind == "within":
                    g_block = splines.symmetric_surface_adjoint(self.basis_omega, gc[k * Kj + k])
                    pen = self.pen_omega_sym
                else:  # full (partial mode)
                    gXi = Bo.T @ gc[k] @ Bo
                    g_block = gXi.ravel()
                    pen = self.pen_omega_full
                grad[sl] = g_block + splines.igmrf_grad_xi(xi, tau, pen)
                quad_sum += float(xi @ pen.Q @ xi)
                rank_sum += pen.rank
            grad[lt_idx] = (0.5 * rank_sum - 0.5 * tau * quad_sum
                            + self._gamma_prior_grad(pv.log_tau_omega[fi]))

        # dispersion
        d_phi = np.sum(digamma(y + phi) - digamma(phi) + (log_phi - L)
                       + 1.0 - (y + phi) * (1.0 - r) / phi)
        grad[self.idx_log_phi] = phi * d_phi - spec.phi_rate * phi + 1.0

        return total, grad

    def value(self, theta: np.ndarray) -> float:
        return self.value_and_grad(theta)[0]

    def _gamma_prior_log(self, log_tau: float) -> float:
        a, b = self.spec.tau_shape, self.spec.tau_rate
        tau = np.exp(log_tau)
        return a * np.log(b) - gammaln(a) + (a - 1) * log_tau - b * tau + log_tau

    def _gamma_prior_grad(self, log_tau: float) -> float:
        a, b = self.spec.tau_shape, self.spec.tau_rate
        return a - b * np.exp(log_tau)

    # ----------------------------------------------------------------- #
    # derived quantities
    # ----------------------------------------------------------------- #
    def expected_counts(self, theta: np.ndarray) -> np.ndarray:
        """E[Y] tensor in the native data layout; zero where N = 0."""
        *_, log_mu = self._forward(theta)
        mu = np.where(self.n_src > 0, np.exp(log_mu), 0.0)
        if self.spec.mode == "complete":
            return mu.reshape(self.K, self.K, self.A, self.A)
        return mu

    def map_parameters(self, theta: np.ndarray) -> dict:
        """Map an unconstrained vector to (gamma, delta, m, phi)."""
        pv, f, log_gamma, comps, omega, logp, p, log_delta, _ = self._forward(theta)
        gamma = np.exp(log_gamma)
        delta = np.exp(log_delta)
        m = gamma[None, :, :] * delta * np.exp(self.log_p_tgt)
        if self.spec.mode == "complete":
            delta = delta.reshape(self.K, self.K, self.A, self.A)
            m = m.reshape(self.K, self.K, self.A, self.A)
        return {"gamma": gamma, "delta": delta, "m": m,
                "phi": float(np.exp(pv.log_phi))}


def log_joint_and_grad(theta: np.ndarray, spec: ModelSpec, data: SurveyTensor,
                       pop: PopulationTable):
    """One-shot log joint evaluation; build a LogJoint for repeated use."""
    return LogJoint(spec, data, pop).value_and_grad(theta)
