"""Log joint assembly: centering, NB likelihood, expected counts, gradients."""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from scipy.stats import poisson

from stratmix import constraints
from stratmix.domain import (AgeGrid, FeatureSpec, PopulationTable, StrataSpace,
                             SurveyTensor)
from stratmix.model import (LogJoint, ModelSpec, beta0_center, nb_logpmf,
                            nb_sample)


def make_setup(mode, sizes, A, seed=0, M_gamma=4, M_omega=4, lam=2.0):
    rng = np.random.default_rng(seed)
    feats = tuple(FeatureSpec(f"f{i}", tuple(f"c{j}" for j in range(k)))
                  for i, k in enumerate(sizes))
    space = StrataSpace(feats)
    grid = AgeGrid.from_range(0, A - 1)
    K = space.K_star
    pop = PopulationTable(rng.uniform(40, 160, (K, A)), space, grid)
    N = rng.integers(0, 6, (K, A)).astype(float)
    if mode == "complete":
        Y = np.zeros((K, K, A, A))
        for s in range(K):
            for a in range(A):
                if N[s, a]:
                    Y[s, :, a, :] = rng.poisson(lam, (K, A))
    else:
        Y = np.zeros((K, A, A))
        for s in range(K):
            for a in range(A):
                if N[s, a]:
                    Y[s, a, :] = rng.poisson(lam, A)
    data = SurveyTensor(mode, Y, N, space, grid)
    spec = ModelSpec(mode, space, grid, M_gamma=M_gamma, M_omega=M_omega)
    return spec, data, pop, rng


class TestBeta0Center:
    def test_unit_population_gives_zero(self):
        space = StrataSpace((FeatureSpec("g", ("a", "b")),))
        grid = AgeGrid.from_range(0, 3)
        pop = PopulationTable(np.ones((2, 4)), space, grid)
        assert beta0_center(pop, "complete") == 0.0

    def test_partial_with_e_population(self):
        space = StrataSpace(())
        grid = AgeGrid.from_range(0, 4)
        pop = PopulationTable(np.full((1, 5), np.e), space, grid)
        assert beta0_center(pop, "partial") == pytest.approx(-1.0, rel=1e-12)

    def test_single_stratum_modes_agree(self):
        rng = np.random.default_rng(1)
        space = StrataSpace(())
        grid = AgeGrid.from_range(0, 6)
        pop = PopulationTable(rng.uniform(10, 90, (1, 7)), space, grid)
        assert beta0_center(pop, "complete") == pytest.approx(
            beta0_center(pop, "partial"), rel=1e-12)


class TestNbLogpmf:
    def test_zero_count_closed_form(self):
        mu, phi = 3.5, 2.0
        assert nb_logpmf(0, mu, phi) == pytest.approx(
            phi * np.log(phi / (phi + mu)), rel=1e-12)

    def test_poisson_limit(self):
        val = nb_logpmf(2, 3.0, 1e8)
        assert val == pytest.approx(poisson.logpmf(2, 3.0), abs=1e-6)

    def test_moments_match_variance_identity(self):
        rng = np.random.default_rng(2)
        mu, phi, n = 5.0, 2.0, 10 ** 6
        y = nb_sample(mu, phi, rng, size=n)
        var = mu + mu * mu / phi               # 17.5
        se_mean = np.sqrt(var / n)
        assert abs(y.mean() - mu) < 3 * se_mean
        # variance of the sample variance for an overdispersed count
        m4 = np.mean((y - y.mean()) ** 4)
        se_var = np.sqrt((m4 - var ** 2) / n)
        assert abs(y.var() - var) < 3 * se_var

    def test_domain_violations(self):
        with pytest.raises(ValueError):
            nb_logpmf(1, -1.0, 2.0)
        with pytest.raises(ValueError):
            nb_logpmf(1.5, 1.0, 2.0)


class TestExpectedCounts:
    def test_centering_fixed_point(self):
        """Zero coefficients: delta is 1 and E[Y] = exp(beta0) * P_b * N."""
        spec, data, pop, _ = make_setup("complete", [2], 4, seed=3)
        lj = LogJoint(spec, data, pop)
        theta = np.zeros(lj.dim)
        theta[lj.idx_beta0] = -2.0
        mu = lj.expected_counts(theta)
        expect = np.exp(-2.0) * pop.counts[None, :, None, :] \
            * data.N[:, None, :, None]
        np.testing.assert_allclose(mu, np.where(expect * 0 + data.N[:, None, :, None] > 0,
                                                expect, 0.0), rtol=1e-10)
        mp = lj.map_parameters(theta)
        np.testing.assert_allclose(mp["delta"], 1.0, atol=1e-10)

    def test_single_stratum_partial_identity(self):
        """K*=1: consistency forces delta = 1, so E[Y] = gamma * P_b * N_a."""
        spec, data, pop, rng = make_setup("partial", [], 5, seed=4)
        lj = LogJoint(spec, data, pop)
        theta = rng.standard_normal(lj.dim) * 0.3
        mu = lj.expected_counts(theta)
        mp = lj.map_parameters(theta)
        expect = mp["gamma"][None] * pop.totals[None, None, :] * data.N[:, :, None]
        np.testing.assert_allclose(mu, np.where(data.N[:, :, None] > 0, expect, 0.0),
                                    rtol=1e-10)

    def test_against_straight_line_oracle(self):
        """Independent loop evaluation of the full complete-mode pipeline."""
        spec, data, pop, rng = make_setup("complete", [2], 4, seed=5)
        lj = LogJoint(spec, data, pop)
        theta = lj.init_theta() + 0.2 * rng.standard_normal(lj.dim)
        mu = lj.expected_counts(theta)
        pv = lj.unpack(theta)

        from stratmix import splines
        K, A = 2, 4
        B = lj.basis_gamma.B
        f = splines.symmetric_surface(lj.basis_gamma, pv.xi_gamma)
        gamma = np.exp(pv.beta0 + f)
        Bo = lj.basis_omega.B
        blocks = pv.omega_blocks[0]
        surf_between = Bo @ blocks[0].reshape(4, 4) @ Bo.T
        surf_w0 = splines.symmetric_surface(lj.basis_omega, blocks[1])
        surf_w1 = splines.symmetric_surface(lj.basis_omega, blocks[2])
        prop = pop.proportions
        for a in range(A):
            for b in range(A):
                omega_f = np.empty((K, K))
                omega_f[0, 0] = surf_w0[a, b]
                omega_f[0, 1] = surf_between[a, b]
                omega_f[1, 0] = surf_between[b, a]
                omega_f[1, 1] = surf_w1[a, b]
                s_f = np.outer(prop[:, a], prop[:, b])
                w_f = np.log(s_f) - np.mean(np.log(s_f))
                z = (omega_f + w_f).ravel()
                p = np.exp(z - z.max())
                p /= p.sum()
                delta_f = p.reshape(K, K) / s_f
                for s in range(K):
                    for t in range(K):
                        if data.N[s, a] == 0:
                            assert mu[s, t, a, b] == 0.0
                            continue
                        expect = gamma[a, b] * delta_f[s, t] \
                            * pop.counts[t, b] * data.N[s, a]
                        assert mu[s, t, a, b] == pytest.approx(expect, rel=1e-9)


class TestLogJointGradient:
    @pytest.mark.parametrize("mode,sizes,seed", [
        ("complete", [2], 10), ("partial", [3], 11), ("complete", [2, 2], 12),
        ("partial", [2, 2], 13), ("complete", [], 14),
    ])
    def test_gradient_matches_finite_differences(self, mode, sizes, seed):
        spec, data, pop, rng = make_setup(mode, sizes, 4, seed=seed)
        lj = LogJoint(spec, data, pop)
        theta = lj.init_theta() + 0.15 * rng.standard_normal(lj.dim)
        _, g = lj.value_and_grad(theta)
        h = 1e-5
        for i in rng.choice(lj.dim, size=min(lj.dim, 40), replace=False):
            tp, tm = theta.copy(), theta.copy()
            step = h * max(1.0, abs(theta[i]))
            tp[i] += step
            tm[i] -= step
            fd = (lj.value(tp) - lj.value(tm)) / (2 * step)
            assert abs(g[i] - fd) <= 1e-5 * (1.0 + abs(fd))

    def test_null_space_shift_changes_likelihood_not_penalty(self):
        spec, data, pop, rng = make_setup("complete", [], 5, seed=15)
        lj = LogJoint(spec, data, pop)
        theta = lj.init_theta()
        shifted = theta.copy()
        pvals = np.ones(lj.sl_xi_gamma.stop - lj.sl_xi_gamma.start)
        shifted[lj.sl_xi_gamma] = theta[lj.sl_xi_gamma] + 0.3 * pvals
        pv0 = lj.unpack(theta)
        pv1 = lj.unpack(shifted)
        q0 = pv0.xi_gamma @ lj.pen_gamma.Q @ pv0.xi_gamma
        q1 = pv1.xi_gamma @ lj.pen_gamma.Q @ pv1.xi_gamma
        assert q1 == pytest.approx(q0, abs=1e-9)
        assert lj.value(shifted) != pytest.approx(lj.value(theta), abs=1e-6)

    def test_count_scaling_leaves_intensity_mle_invariant(self):
        """Doubling N and Y leaves the per-cell MLE of mu / N unchanged.

        Checked by direct 1-D likelihood optimization on a 2-age toy with
        delta = 1 and a single stratum.
        """
        rng = np.random.default_rng(16)
        phi = 4.0
        N1 = np.array([3.0, 5.0])
        y1 = np.array([[4, 7], [6, 2]], dtype=float)

        def mle(y, n):
            def neg(mlog):
                return -float(nb_logpmf(y, np.exp(mlog) * n, phi))
            res = minimize_scalar(neg, bounds=(-8, 8), method="bounded",
                                  options={"xatol": 1e-12})
            return np.exp(res.x)

        for a in range(2):
            for b in range(2):
                m1 = mle(y1[a, b], N1[a])
                m2 = mle(2 * y1[a, b], 2 * N1[a])
                assert m2 == pytest.approx(m1, rel=1e-6)

    def test_constraints_hold_at_any_parameter(self):
        spec, data, pop, rng = make_setup("complete", [2, 2], 4, seed=17)
        lj = LogJoint(spec, data, pop)
        perm = constraints.build_transpose_permutation(4)
        prop = constraints.proportion_tensor(pop, "complete")
        for _ in range(5):
            theta = lj.init_theta() + rng.standard_normal(lj.dim)
            mp = lj.map_parameters(theta)
            flat = mp["delta"].reshape(16, 4, 4)
            assert constraints.consistency_residual(flat, prop) <= 1e-12
            assert constraints.reciprocity_residual(flat, perm) <= 1e-12

    def test_log_joint_finite_for_large_parameters(self):
        spec, data, pop, rng = make_setup("complete", [2], 4, seed=18)
        lj = LogJoint(spec, data, pop)
        theta = 50.0 * rng.standard_normal(lj.dim)
        value, grad = lj.value_and_grad(theta)
        assert np.isfinite(value)
        assert np.all(np.isfinite(grad))

    def test_mode_mismatch_rejected(self):
        spec, data, pop, _ = make_setup("complete", [2], 4, seed=19)
        bad = ModelSpec("partial", spec.space, spec.grid, M_gamma=4, M_omega=4)
        with pytest.raises(Exception, match="mode"):
            LogJoint(bad, data, pop)

    def test_log_offsets_scale_expected_counts(self):
        spec, data, pop, rng = make_setup("partial", [2], 4, seed=20)
        off = rng.normal(scale=0.5, size=data.Y.shape)
        with_off = SurveyTensor("partial", data.Y, data.N, data.space,
                                data.grid, offsets=off)
        lj0 = LogJoint(spec, data, pop)
        lj1 = LogJoint(spec, with_off, pop)
        theta = lj0.init_theta()
        mu0 = lj0.expected_counts(theta)
        mu1 = lj1.expected_counts(theta)
        live = np.broadcast_to((data.N > 0)[:, :, None], mu0.shape)
        np.testing.assert_allclose(mu1[live], mu0[live] * np.exp(off)[live],
                                   rtol=1e-12)
        # gradient still exact with offsets in place
        theta = theta + 0.1 * rng.standard_normal(lj1.dim)
        _, g = lj1.value_and_grad(theta)
        for i in rng.choice(lj1.dim, size=10, replace=False):
            h = 1e-6
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            fd = (lj1.value(tp) - lj1.value(tm)) / (2 * h)
            assert abs(g[i] - fd) <= 1e-5 * (1.0 + abs(fd))
