"""Command-line surface: simulate, fit, predict, benchmark.

Every command is reproducible from (config, seed); run directories carry
the config hash in their meta files.  Exit codes: 0 ok, 2 config error,
3 numerical failure, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import baselines, io, metrics
from .domain import DataError, aggregate_survey
from .inference import FitConfig, fit, sample_posterior
from .io import ConfigError
from .model import ModelSpec
from .prediction import predict_complete
from .simulation import ScenarioConfig, simulate_scenario


def _load_scenario(path: Path) -> ScenarioConfig:
    payload = io.read_json(path)
    try:
        return ScenarioConfig.from_json(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _model_config(payload: dict, space, grid, path: str):
    """Validate the fit config JSON and build (ModelSpec, FitConfig)."""
    def expect(cond, msg):
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    mode = payload.get("mode")
    expect(mode in ("complete", "partial"), f"mode must be complete|partial, got {mode!r}")
    active = payload.get("active_features")
    if active is not None:
        names = [f.name for f in space.features]
        idx = []
        for item in active:
            expect(item in names, f"active_features entry {item!r} not among {names}")
            idx.append(names.index(item))
        active = tuple(idx)
    override = payload.get("beta0_center_override")
    spec = ModelSpec(
        mode=mode, space=space, grid=grid,
        M_gamma=int(payload.get("M_gamma", 15)),
        M_omega=int(payload.get("M_omega", 15)),
        beta0_center_override=None if override is None else float(override),
        active_features=active,
    )
    fit_mode = payload.get("fit_mode", "svi")
    expect(fit_mode in ("svi", "map"), f"fit_mode must be svi|map, got {fit_mode!r}")
    cfg = FitConfig(
        iterations=int(payload.get("iterations", 20000)),
        mc_samples=int(payload.get("mc_samples", 1)),
        max_lr=float(payload.get("max_lr", 0.01)),
        seed=int(payload.get("seed", 0)),
        posterior_draws=int(payload.get("posterior_draws", 3000)),
        mode=fit_mode,
    )
    return spec, cfg


def cmd_simulate(args) -> int:
    cfg = _load_scenario(Path(args.config))
    if args.seed is not None:
        cfg = ScenarioConfig.from_json({**cfg.to_json(), "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = simulate_scenario(cfg)

    meta = {
        "age_min": int(cfg.grid.ages[0]),
        "age_max": int(cfg.grid.ages[-1]),
        "features": [{"name": f.name, "categories": list(f.categories)}
                     for f in cfg.features],
        "columns": io.DEFAULT_COLUMNS,
        "scenario": cfg.to_json(),
        "config_hash": io.config_hash(cfg.to_json()),
        "seed": cfg.seed,
    }
    io.write_json(out / "meta.json", meta)
    io.write_population_csv(out / "population.csv", bundle.pop)
    io.write_survey_csvs(out, bundle.records, cfg.space, cfg.grid)

    gt = out / "ground_truth"
    gt.mkdir(exist_ok=True)
    io.write_tensor_csv(gt / "gamma.csv", bundle.truth.gamma, ["a", "b"])
    io.write_tensor_csv(gt / "delta.csv", bundle.truth.delta, ["s", "t", "a", "b"])
    io.write_tensor_csv(gt / "m.csv", bundle.truth.m, ["s", "t", "a", "b"])
    io.write_tensor_csv(gt / "eta.csv", bundle.truth.eta, ["s", "t", "a", "b"])
    print(f"simulated {cfg.n_respondents} respondents "
          f"({bundle.records.contact_age.size} contacts) with seed {cfg.seed} -> {out}")
    return 0


def _load_data_dir(data_dir: Path, mode: str):
    meta = io.read_json(data_dir / "meta.json")
    grid, space = io.space_from_meta(meta)
    columns = meta.get("columns")
    pop = io.read_population_csv(data_dir / "population.csv", space, grid, columns)
    records = io.read_survey_csvs(data_dir, space, grid, mode, columns)
    return meta, grid, space, pop, records


def cmd_fit(args) -> int:
    data_dir = Path(args.data)
    payload = io.read_json(Path(args.config))
    if args.mode:
        payload["mode"] = args.mode
    if args.seed is not None:
        payload["seed"] = args.seed
    meta = io.read_json(data_dir / "meta.json")
    grid, space = io.space_from_meta(meta)
    spec, cfg = _model_config(payload, space, grid, args.config)

    _, grid, space, pop, records = _load_data_dir(data_dir, spec.mode)
    data = aggregate_survey(records, space, grid)
    result = fit(spec, data, pop, cfg)
    post = sample_posterior(result)
    summaries = post.summarize()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_summaries_csv(out / "summaries.csv", summaries, spec.mode)
    steps = np.arange(result.trace.size)
    from .inference import one_cycle_lr
    lrs = [one_cycle_lr(int(s), cfg.iterations, cfg.max_lr,
                        cfg.warmup_frac, cfg.div_factor, cfg.final_div)
           for s in steps]
    pd.DataFrame({"step": steps, "objective": result.trace, "lr": lrs}) \
        .to_csv(out / "elbo_trace.csv", index=False)
    io.write_json(out / "summaries.json",
                  io.summaries_to_json(summaries, spec.mode))
    io.write_json(out / "trace.json", io.trace_to_json(result.trace))
    if args.save_draws:
        io.write_draws_csv(out / "draws.csv", post)
    np.savez(out / "state.npz", mu=result.state.mu,
             log_sigma=result.state.log_sigma)
    io.write_json(out / "fit_meta.json", {
        "model_config": payload,
        "config_hash": io.config_hash(payload),
        "seed": cfg.seed,
        "mode": spec.mode,
        "data_dir": str(data_dir.resolve()),
        "runtime_seconds": result.runtime_seconds,
        "n_params": int(result.state.mu.size),
    })
    print(f"fit ({spec.mode}, {cfg.iterations} iterations) done in "
          f"{result.runtime_seconds:.1f}s -> {out}")
    return 0


def cmd_predict(args) -> int:
    fit_dir = Path(args.fit)
    fmeta = io.read_json(fit_dir / "fit_meta.json")
    if fmeta.get("mode") != "partial":
        raise DataError("predict needs a partial-mode fit; this one is "
                        f"{fmeta.get('mode')!r}")
    data_dir = Path(args.data) if args.data else Path(fmeta["data_dir"])
    meta = io.read_json(data_dir / "meta.json")
    grid, space = io.space_from_meta(meta)
    spec, cfg = _model_config(fmeta["model_config"], space, grid, str(fit_dir))
    _, grid, space, pop, records = _load_data_dir(data_dir, "partial")
    data = aggregate_survey(records, space, grid)

    from .inference import FitResult, VariationalState
    from .model import LogJoint
    state_file = np.load(fit_dir / "state.npz")
    model = LogJoint(spec, data, pop)
    state = VariationalState(state_file["mu"], state_file["log_sigma"])
    result = FitResult(state, np.zeros(1), cfg, spec, model, 0.0)
    draws = args.draws or cfg.posterior_draws
    post = sample_posterior(result, draws=draws)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alphas = args.alpha or [10.0]
    io.write_json(out / "meta.json", {
        "fit_dir": str(fit_dir.resolve()),
        "config_hash": fmeta.get("config_hash"),
        "seed": cfg.seed,
        "alphas": alphas,
        "draws": draws,
    })
    for alpha in alphas:
        sub = out if len(alphas) == 1 else out / f"alpha_{alpha:g}"
        sub.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=cfg.seed, spawn_key=(2, int(alpha * 1000))))
        pred = predict_complete(post, pop, alpha=alpha, rng=rng)
        grids = np.indices(pred.bounds_mean.lower.shape).reshape(4, -1)
        pd.DataFrame({
            "k": grids[0], "l": grids[1], "a": grids[2], "b": grids[3],
            "lower": pred.bounds_mean.lower.ravel(),
            "upper": pred.bounds_mean.upper.ravel(),
        }).to_csv(sub / "bounds.csv", index=False)

        def summarize(arr):
            return {"mean": arr.mean(axis=0),
                    "lo": np.percentile(arr, 2.5, axis=0),
                    "hi": np.percentile(arr, 97.5, axis=0)}

        for name, arr in (("eta", pred.eta), ("m_complete", pred.m)):
            st = summarize(arr)
            frame = {}
            grids = np.indices(st["mean"].shape).reshape(4, -1)
            for i, nm in enumerate(("k", "l", "a", "b")):
                frame[nm] = grids[i]
            frame["mean"] = st["mean"].ravel()
            frame["q025"] = st["lo"].ravel()
            frame["q975"] = st["hi"].ravel()
            pd.DataFrame(frame).to_csv(sub / f"{name}_summaries.csv", index=False)
        print(f"prediction (alpha={alpha:g}, {draws} draws) -> {sub}")
    return 0


def _score_against_truth(est, lo, hi, truth):
    value, excluded = metrics.mape(est, truth, return_excluded=True)
    return {
        "mape": value,
        "mape_excluded_cells": excluded,
        "rmse": metrics.rmse(est, truth),
        "interval_score": metrics.interval_score(lo, hi, truth),
        "coverage": metrics.coverage(lo, hi, truth),
    }


def benchmark_job(scenario_payload: dict, seed: int, method: str,
                  model_overrides: dict, boot_replicates: int,
                  out_dir: str | None, partition_breaks: list | None = None):
    """One (seed, method) benchmark run; pure function of its arguments."""
    cfg = ScenarioConfig.from_json({**scenario_payload, "seed": seed})
    bundle = simulate_scenario(cfg)
    truth_m = bundle.truth.m
    t0 = time.perf_counter()
    if method == "gmix":
        payload = {"mode": "complete", "M_gamma": 10, "M_omega": 8,
                   "iterations": 4000, "seed": seed, "posterior_draws": 500,
                   **model_overrides}
        spec, fcfg = _model_config(payload, cfg.space, cfg.grid, "benchmark.model")
        result = fit(spec, bundle.survey_complete, bundle.pop, fcfg)
        post = sample_posterior(result)
        est = post.m.mean(axis=0)
        lo = np.percentile(post.m, 2.5, axis=0)
        hi = np.percentile(post.m, 97.5, axis=0)
    elif method == "socialmixr_ext":
        if partition_breaks is not None:
            part = baselines.AgePartition.from_breaks(cfg.grid, partition_breaks)
        else:
            part = baselines.AgePartition.singletons(cfg.grid)
            part, _ = baselines.auto_coarsen(part, bundle.survey_complete.N,
                                             alpha=0.05, J=boot_replicates)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(3,)))
        boot = baselines.bootstrap(bundle.records, part, cfg.space, cfg.grid,
                                   bundle.pop, boot_replicates, rng)
        P = bundle.pop.totals
        K = cfg.space.K_star
        A = cfg.grid.A
        est = np.empty((K, K, A, A))
        lo = np.empty_like(est)
        hi = np.empty_like(est)
        for s in range(K):
            for t in range(K):
                est[s, t] = baselines.depixilate(boot.point[s, t], P, part)
                lo[s, t] = baselines.depixilate(boot.q_lo[s, t], P, part)
                hi[s, t] = baselines.depixilate(boot.q_hi[s, t], P, part)
    else:
        raise ConfigError(f"unknown benchmark method {method!r}")
    runtime = time.perf_counter() - t0
    scores = _score_against_truth(est, lo, hi, truth_m)
    scores.update({"seed": seed, "method": method,
                   "runtime_seconds": runtime, "elpd": None})
    if out_dir is not None:
        adir = Path(out_dir) / "artifacts" / f"seed{seed}_{method}"
        adir.mkdir(parents=True, exist_ok=True)
        io.write_tensor_csv(adir / "estimate.csv", est, ["s", "t", "a", "b"])
        io.write_tensor_csv(adir / "lower.csv", lo, ["s", "t", "a", "b"])
        io.write_tensor_csv(adir / "upper.csv", hi, ["s", "t", "a", "b"])
        io.write_tensor_csv(adir / "truth.csv", truth_m, ["s", "t", "a", "b"])
    return scores


def cmd_benchmark(args) -> int:
    payload = io.read_json(Path(args.config))
    scenario_payload = dict(payload)
    model_overrides = scenario_payload.pop("model", {})
    boot_replicates = int(scenario_payload.pop("bootstrap_replicates", 1000))
    partition_breaks = scenario_payload.pop("partition_breaks", None)
    n_seeds = int(scenario_payload.pop("seeds", args.seeds))
    try:
        base_cfg = ScenarioConfig.from_json(scenario_payload)  # validates
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ("gmix", "socialmixr_ext"):
            raise ConfigError(f"unknown method {m!r}; choose from gmix, socialmixr_ext")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(scenario_payload, base_cfg.seed + i, method, model_overrides,
             boot_replicates, str(out), partition_breaks)
            for i in range(n_seeds) for method in methods]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_benchmark_star, jobs))
    else:
        results = [_benchmark_star(j) for j in jobs]
    results.sort(key=lambda r: (r["seed"], r["method"]))

    report = {
        "config_hash": io.config_hash(payload),
        "scenario": scenario_payload,
        "methods": methods,
        "results": results,
    }
    io.write_json(out / "report.json", report)
    rows = []
    for r in results:
        for metric in ("mape", "rmse", "interval_score", "coverage",
                       "runtime_seconds"):
            rows.append({"seed": r["seed"], "method": r["method"],
                         "metric": metric, "value": r[metric]})
    pd.DataFrame(rows).to_csv(out / "plot_data.csv", index=False)
    print(f"benchmark: {len(results)} runs -> {out}")
    return 0


def _benchmark_star(job):
    return benchmark_job(*job)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stratmix",
                                description="Stratified contact matrix toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate a synthetic survey")
    ps.add_argument("--config", required=True)
    ps.add_argument("--out", required=True)
    ps.add_argument("--seed", type=int, default=None)
    ps.set_defaults(func=cmd_simulate)

    pf = sub.add_parser("fit", help="fit the model to survey data")
    pf.add_argument("--data", required=True)
    pf.add_argument("--config", required=True)
    pf.add_argument("--out", required=True)
    pf.add_argument("--mode", choices=["complete", "partial"], default=None)
    pf.add_argument("--seed", type=int, default=None)
    pf.add_argument("--save-draws", action="store_true",
                    help="also write posterior draws in long CSV format")
    pf.set_defaults(func=cmd_fit)

    pp = sub.add_parser("predict", help="predict complete matrices from a partial fit")
    pp.add_argument("--fit", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--data", default=None)
    pp.add_argument("--alpha", type=float, action="append", default=None)
    pp.add_argument("--draws", type=int, default=None)
    pp.set_defaults(func=cmd_predict)

    pb = sub.add_parser("benchmark", help="simulate, fit, and score methods")
    pb.add_argument("--config", required=True)
    pb.add_argument("--out", required=True)
    pb.add_argument("--methods", default="gmix,socialmixr_ext")
    pb.add_argument("--seeds", type=int, default=1)
    pb.add_argument("--jobs", type=int, default=1)
    pb.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
