"""Error metrics, interval scores, and cross-validated ELPD."""

import numpy as np
import pytest

from stratmix.domain import AgeGrid, FeatureSpec
from stratmix.inference import FitConfig
from stratmix.metrics import (coverage, elpd_compare, fold_assignment,
                              interval_score, kfold_elpd, mape, rmse)
from stratmix.model import ModelSpec
from stratmix.simulation import ScenarioConfig, simulate_scenario


class TestMape:
    def test_exact_estimate(self):
        t = np.array([1.0, 2.0, 3.0])
        assert mape(t, t) == 0.0

    def test_ten_percent(self):
        t = np.array([[1.0, 4.0], [2.0, 8.0]])
        assert mape(1.1 * t, t) == pytest.approx(10.0, rel=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        t = rng.uniform(0.5, 3, (4, 4))
        e = rng.uniform(0.5, 3, (4, 4))
        expect = 100 * np.mean([abs(e[i, j] - t[i, j]) / t[i, j]
                                for i in range(4) for j in range(4)])
        assert mape(e, t) == pytest.approx(expect, rel=1e-12)

    def test_zero_truth_excluded_and_counted(self):
        t = np.array([0.0, 2.0])
        e = np.array([5.0, 2.2])
        value, excluded = mape(e, t, return_excluded=True)
        assert excluded == 1
        assert value == pytest.approx(10.0)


class TestIntervalScore:
    def test_covered_equals_width(self):
        assert interval_score(np.array([1.0]), np.array([3.0]),
                              np.array([2.0])) == pytest.approx(2.0)

    def test_miss_penalty(self):
        lo, up, y = np.array([1.0]), np.array([3.0]), np.array([0.9])
        # width 2 plus (2 / 0.05) * 0.1 = 4
        assert interval_score(lo, up, y) == pytest.approx(2.0 + 4.0)

    def test_narrower_covered_interval_scores_lower(self):
        y = np.array([2.0])
        wide = interval_score(np.array([0.0]), np.array([4.0]), y)
        narrow = interval_score(np.array([1.5]), np.array([2.5]), y)
        assert narrow < wide

    def test_rejects_inverted_interval(self):
        with pytest.raises(ValueError):
            interval_score(np.array([3.0]), np.array([1.0]), np.array([2.0]))


class TestCoverage:
    def test_everything_covered(self):
        t = np.array([1.0, 5.0])
        assert coverage(np.zeros(2), np.full(2, np.inf), t) == 100.0

    def test_point_intervals_missing(self):
        t = np.array([1.0, 5.0])
        assert coverage(np.zeros(2), np.zeros(2), t) == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        t = rng.uniform(0, 1, 50)
        lo = t - rng.uniform(0, 0.2, 50)
        hi = t + rng.uniform(-0.05, 0.3, 50)
        hi = np.maximum(hi, lo)
        expect = 100 * np.mean([(lo[i] <= t[i] <= hi[i]) for i in range(50)])
        assert coverage(lo, hi, t) == pytest.approx(expect)


def test_rmse():
    a = np.array([1.0, 2.0])
    b = np.array([2.0, 4.0])
    assert rmse(a, b) == pytest.approx(np.sqrt(2.5))


class TestFoldAssignment:
    def test_partition_covers_all_cells_once(self):
        cfg = ScenarioConfig(grid=AgeGrid.from_range(0, 4),
                             features=(FeatureSpec("g", ("a", "b")),),
                             n_respondents=60, seed=2)
        b = simulate_scenario(cfg)
        assign = fold_assignment(b.survey_complete, 5, seed=7)
        assert assign.shape == (4, 5, 5)
        assert assign.min() >= 0 and assign.max() < 5

    def test_stable_under_seed(self):
        cfg = ScenarioConfig(grid=AgeGrid.from_range(0, 3), features=(),
                             n_respondents=30, seed=3)
        b = simulate_scenario(cfg)
        a1 = fold_assignment(b.survey_complete, 4, seed=11)
        a2 = fold_assignment(b.survey_complete, 4, seed=11)
        a3 = fold_assignment(b.survey_complete, 4, seed=12)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, a3)


@pytest.fixture(scope="module")
def k2_data():
    cfg = ScenarioConfig(grid=AgeGrid.from_range(0, 7),
                         features=(FeatureSpec("g", ("a", "b")),),
                         n_respondents=5000, seed=4,
                         deviation_strength=(0.5,), assortativity=(1.0,))
    return cfg, simulate_scenario(cfg)


class TestKfoldElpd:

    def test_identical_models_zero_difference(self, k2_data):
        cfg, b = k2_data
        spec = ModelSpec("complete", cfg.space, cfg.grid, M_gamma=5, M_omega=4)
        fc = FitConfig(iterations=400, seed=5, posterior_draws=50)
        r1 = kfold_elpd(spec, b.survey_complete, b.pop, fc, folds=3, draws=50)
        r2 = kfold_elpd(spec, b.survey_complete, b.pop, fc, folds=3, draws=50)
        diff, se = elpd_compare(r1, r2)
        assert diff == 0.0
        assert se == 0.0

    def test_saturated_beats_misspecified(self, k2_data):
        """The feature-aware model wins on strongly stratified data."""
        cfg, b = k2_data
        fc = FitConfig(iterations=1500, seed=6, posterior_draws=100)
        sat = ModelSpec("complete", cfg.space, cfg.grid, M_gamma=5, M_omega=4)
        mis = ModelSpec("complete", cfg.space, cfg.grid, M_gamma=5, M_omega=4,
                        active_features=())
        r_sat = kfold_elpd(sat, b.survey_complete, b.pop, fc, folds=3, draws=100)
        r_mis = kfold_elpd(mis, b.survey_complete, b.pop, fc, folds=3, draws=100)
        diff, se = elpd_compare(r_sat, r_mis)
        assert diff > 2 * se
        assert diff > 0

    def test_pointwise_values_finite_nonpositive(self, k2_data):
        cfg, b = k2_data
        spec = ModelSpec("complete", cfg.space, cfg.grid, M_gamma=5, M_omega=4)
        fc = FitConfig(iterations=300, seed=7, posterior_draws=40)
        res = kfold_elpd(spec, b.survey_complete, b.pop, fc, folds=3, draws=40)
        assert np.all(np.isfinite(res.pointwise))
        assert np.all(res.pointwise <= 1e-9)

    def test_heldout_cells_partition(self, k2_data):
        """Every masked data cell is scored in exactly one fold."""
        cfg, b = k2_data
        spec = ModelSpec("complete", cfg.space, cfg.grid, M_gamma=5, M_omega=4)
        fc = FitConfig(iterations=100, seed=8, posterior_draws=20)
        res = kfold_elpd(spec, b.survey_complete, b.pop, fc, folds=3, draws=20)
        assert len(set(res.cell_ids)) == len(res.cell_ids)
        K, A = 2, 8
        n_data_cells = int((b.survey_complete.N > 0).sum()) * K * A
        assert len(res.cell_ids) == n_data_cells
