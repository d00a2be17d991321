"""CLI surface: simulate, fit, predict, benchmark; reproducibility."""

import json

import numpy as np
import pandas as pd
import pytest

from stratmix import io as sio
from stratmix.cli import main
from stratmix.metrics import coverage, interval_score, mape, rmse


def scenario_payload(**kw):
    payload = {
        "age_min": 0, "age_max": 7,
        "features": [{"name": "sex", "categories": ["m", "f"]}],
        "n_respondents": 120,
        "seed": 5,
    }
    payload.update(kw)
    return payload


def model_payload(**kw):
    payload = {"mode": "complete", "M_gamma": 5, "M_omega": 4,
               "iterations": 150, "seed": 2, "posterior_draws": 30}
    payload.update(kw)
    return payload


def write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2))


@pytest.fixture()
def sim_dir(tmp_path):
    cfg = tmp_path / "scenario.json"
    write_json(cfg, scenario_payload())
    out = tmp_path / "data"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    return out


class TestSimulate:
    def test_outputs_exist_and_counts_match(self, sim_dir):
        for name in ("meta.json", "population.csv", "respondents.csv",
                     "contacts_complete.csv", "contacts_partial.csv",
                     "ground_truth/m.csv"):
            assert (sim_dir / name).exists(), name
        resp = pd.read_csv(sim_dir / "respondents.csv")
        assert len(resp) == 120

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = tmp_path / "scenario.json"
        write_json(cfg, scenario_payload())
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
            outs.append(out)
        for fname in ("population.csv", "respondents.csv",
                      "contacts_complete.csv", "ground_truth/m.csv"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_three_binary_features_give_64_matrices(self, tmp_path):
        cfg = tmp_path / "scenario.json"
        write_json(cfg, scenario_payload(
            features=[{"name": f"f{i}", "categories": ["0", "1"]} for i in range(3)],
            n_respondents=60, age_max=5))
        out = tmp_path / "e"
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        delta = pd.read_csv(out / "ground_truth" / "delta.csv")
        assert delta[["s", "t"]].drop_duplicates().shape[0] == 64

    def test_bad_config_exit_code(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        assert main(["simulate", "--config", str(cfg), "--out",
                     str(tmp_path / "x")]) == 2

    def test_csv_round_trip_preserves_tensors(self, sim_dir):
        meta = sio.read_json(sim_dir / "meta.json")
        grid, space = sio.space_from_meta(meta)
        pop = sio.read_population_csv(sim_dir / "population.csv", space, grid)
        records = sio.read_survey_csvs(sim_dir, space, grid, "complete")
        from stratmix.domain import aggregate_survey
        data = aggregate_survey(records, space, grid)
        assert data.Y.sum() == len(pd.read_csv(sim_dir / "contacts_complete.csv"))
        assert pop.counts.shape == (2, 8)


class TestFit:
    def test_fit_writes_outputs(self, sim_dir, tmp_path):
        mc = tmp_path / "model.json"
        write_json(mc, model_payload())
        out = tmp_path / "fit"
        assert main(["fit", "--data", str(sim_dir), "--config", str(mc),
                     "--out", str(out)]) == 0
        for name in ("summaries.csv", "elbo_trace.csv", "fit_meta.json",
                     "state.npz"):
            assert (out / name).exists(), name
        summ = pd.read_csv(out / "summaries.csv")
        assert set(summ["quantity"]) == {"gamma", "delta", "m", "phi"}

    def test_rerun_same_seed_identical_summaries(self, sim_dir, tmp_path):
        mc = tmp_path / "model.json"
        write_json(mc, model_payload())
        outs = []
        for name in ("f1", "f2"):
            out = tmp_path / name
            assert main(["fit", "--data", str(sim_dir), "--config", str(mc),
                         "--out", str(out)]) == 0
            outs.append(out)
        assert (outs[0] / "summaries.csv").read_bytes() == \
            (outs[1] / "summaries.csv").read_bytes()
        assert (outs[0] / "elbo_trace.csv").read_bytes() == \
            (outs[1] / "elbo_trace.csv").read_bytes()

    def test_mode_guard_missing_contacts_file(self, sim_dir, tmp_path):
        (sim_dir / "contacts_partial.csv").unlink()
        mc = tmp_path / "model.json"
        write_json(mc, model_payload(mode="partial"))
        out = tmp_path / "fit"
        assert main(["fit", "--data", str(sim_dir), "--config", str(mc),
                     "--out", str(out)]) == 4

    def test_bad_mode_config(self, sim_dir, tmp_path):
        mc = tmp_path / "model.json"
        write_json(mc, model_payload(mode="sideways"))
        assert main(["fit", "--data", str(sim_dir), "--config", str(mc),
                     "--out", str(tmp_path / "x")]) == 2

    def test_save_draws_and_json_outputs(self, sim_dir, tmp_path):
        mc = tmp_path / "model.json"
        write_json(mc, model_payload(posterior_draws=10))
        out = tmp_path / "fit"
        assert main(["fit", "--data", str(sim_dir), "--config", str(mc),
                     "--out", str(out), "--save-draws"]) == 0
        for name in ("draws.csv", "summaries.json", "trace.json"):
            assert (out / name).exists(), name
        draws = pd.read_csv(out / "draws.csv")
        assert set(draws["quantity"]) == {"gamma", "delta", "m", "phi"}

    def test_single_stratum_toy_fits_quickly(self, tmp_path):
        """Default 20k-iteration budget on a K*=1, A=6, N=200 toy."""
        import time
        cfg = tmp_path / "scenario.json"
        write_json(cfg, scenario_payload(features=[], n_respondents=200,
                                         age_max=5))
        data = tmp_path / "toy"
        main(["simulate", "--config", str(cfg), "--out", str(data)])
        mc = tmp_path / "model.json"
        write_json(mc, {"mode": "complete", "M_gamma": 5, "M_omega": 4,
                        "seed": 1, "posterior_draws": 50})
        out = tmp_path / "toyfit"
        t0 = time.perf_counter()
        assert main(["fit", "--data", str(data), "--config", str(mc),
                     "--out", str(out)]) == 0
        assert time.perf_counter() - t0 < 60.0


class TestPredict:
    @pytest.fixture()
    def partial_fit(self, tmp_path):
        cfg = tmp_path / "scenario.json"
        write_json(cfg, scenario_payload(n_respondents=150))
        data = tmp_path / "data"
        main(["simulate", "--config", str(cfg), "--out", str(data)])
        mc = tmp_path / "model.json"
        write_json(mc, model_payload(mode="partial", iterations=250,
                                     posterior_draws=40))
        fdir = tmp_path / "fit"
        assert main(["fit", "--data", str(data), "--config", str(mc),
                     "--out", str(fdir)]) == 0
        return fdir, tmp_path

    def test_predict_outputs(self, partial_fit):
        fdir, tmp_path = partial_fit
        out = tmp_path / "pred"
        assert main(["predict", "--fit", str(fdir), "--out", str(out),
                     "--draws", "25"]) == 0
        bounds = pd.read_csv(out / "bounds.csv")
        assert np.all(bounds["lower"] <= bounds["upper"] + 1e-12)
        for name in ("eta_summaries.csv", "m_complete_summaries.csv"):
            assert (out / name).exists()
        meta = json.loads((out / "meta.json").read_text())
        fit_meta = json.loads((fdir / "fit_meta.json").read_text())
        assert meta["config_hash"] == fit_meta["config_hash"]

    def test_alpha_sweep_creates_one_dir_per_value(self, partial_fit):
        fdir, tmp_path = partial_fit
        out = tmp_path / "sweep"
        assert main(["predict", "--fit", str(fdir), "--out", str(out),
                     "--alpha", "5", "--alpha", "20", "--draws", "15"]) == 0
        assert (out / "alpha_5" / "bounds.csv").exists()
        assert (out / "alpha_20" / "bounds.csv").exists()

    def test_complete_fit_rejected(self, sim_dir, tmp_path):
        mc = tmp_path / "model.json"
        write_json(mc, model_payload())
        fdir = tmp_path / "cfit"
        main(["fit", "--data", str(sim_dir), "--config", str(mc),
              "--out", str(fdir)])
        assert main(["predict", "--fit", str(fdir),
                     "--out", str(tmp_path / "p")]) == 4


class TestBenchmark:
    def test_two_seeds_two_methods(self, tmp_path):
        cfg = tmp_path / "bench.json"
        write_json(cfg, scenario_payload(
            n_respondents=250, age_max=5,
            model={"iterations": 200, "M_gamma": 4, "M_omega": 4,
                   "posterior_draws": 40},
            bootstrap_replicates=100))
        out = tmp_path / "bench"
        assert main(["benchmark", "--config", str(cfg), "--out", str(out),
                     "--methods", "gmix,socialmixr_ext", "--seeds", "2"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["results"]) == 4
        for r in report["results"]:
            assert "runtime_seconds" in r and r["runtime_seconds"] > 0
            assert np.isfinite(r["mape"])
        plot = pd.read_csv(out / "plot_data.csv")
        assert set(plot["method"]) == {"gmix", "socialmixr_ext"}

    def test_report_matches_rescoring_artifacts(self, tmp_path):
        cfg = tmp_path / "bench.json"
        write_json(cfg, scenario_payload(
            n_respondents=250, age_max=5,
            model={"iterations": 150, "M_gamma": 4, "M_omega": 4,
                   "posterior_draws": 30},
            bootstrap_replicates=80))
        out = tmp_path / "bench"
        assert main(["benchmark", "--config", str(cfg), "--out", str(out),
                     "--methods", "gmix", "--seeds", "1"]) == 0
        report = json.loads((out / "report.json").read_text())
        row = report["results"][0]
        adir = out / "artifacts" / f"seed{row['seed']}_gmix"
        names = ["s", "t", "a", "b"]
        est = sio.read_tensor_csv(adir / "estimate.csv", names)
        lo = sio.read_tensor_csv(adir / "lower.csv", names)
        hi = sio.read_tensor_csv(adir / "upper.csv", names)
        truth = sio.read_tensor_csv(adir / "truth.csv", names)
        assert mape(est, truth) == pytest.approx(row["mape"], rel=1e-9)
        assert rmse(est, truth) == pytest.approx(row["rmse"], rel=1e-9)
        assert interval_score(lo, hi, truth) == pytest.approx(
            row["interval_score"], rel=1e-9)
        assert coverage(lo, hi, truth) == pytest.approx(row["coverage"], rel=1e-9)

    def test_unknown_method_rejected(self, tmp_path):
        cfg = tmp_path / "bench.json"
        write_json(cfg, scenario_payload())
        assert main(["benchmark", "--config", str(cfg),
                     "--out", str(tmp_path / "x"),
                     "--methods", "magic"]) == 2

    def test_parallel_jobs_match_sequential(self, tmp_path):
        cfg = tmp_path / "bench.json"
        write_json(cfg, scenario_payload(
            n_respondents=150, age_max=4,
            model={"iterations": 80, "M_gamma": 4, "M_omega": 4,
                   "posterior_draws": 15},
            bootstrap_replicates=40))
        reports = []
        for jobs, name in ((1, "seq"), (2, "par")):
            out = tmp_path / name
            assert main(["benchmark", "--config", str(cfg), "--out", str(out),
                         "--methods", "gmix,socialmixr_ext", "--seeds", "2",
                         "--jobs", str(jobs)]) == 0
            reports.append(json.loads((out / "report.json").read_text()))
        for r_seq, r_par in zip(reports[0]["results"], reports[1]["results"]):
            for key in ("seed", "method", "mape", "rmse", "coverage"):
                assert r_seq[key] == r_par[key]

    def test_partition_breaks_override(self, tmp_path):
        cfg = tmp_path / "bench.json"
        write_json(cfg, scenario_payload(
            n_respondents=200, age_max=5,
            partition_breaks=[0, 3],
            bootstrap_replicates=40))
        out = tmp_path / "bench"
        assert main(["benchmark", "--config", str(cfg), "--out", str(out),
                     "--methods", "socialmixr_ext", "--seeds", "1"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert np.isfinite(report["results"][0]["mape"])
