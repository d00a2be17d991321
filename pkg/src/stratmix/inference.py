"""Mean-field Gaussian variational inference and posterior sampling.

The variational family is a diagonal Gaussian over the unconstrained
parameter vector.  The single-sample reparameterized ELBO estimate is
optimized with Adam under a one-cycle learning-rate schedule; a MAP mode
(plain maximization of the log joint) is available for fast smoke runs.
Runs are deterministic given (seed, config, data): identical inputs give
bitwise-identical states.

Mean-field covariance underestimates posterior variance; interval
coverage below nominal in simple settings is a known consequence and is
accepted here.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .domain import ContactMatrixSet, PopulationTable, SurveyTensor
from .model import LogJoint, ModelSpec


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 20000
    mc_samples: int = 1
    max_lr: float = 0.01
    seed: int = 0
    posterior_draws: int = 3000
    mode: str = "svi"  # "svi" | "map"
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_sigma: float = 0.1
    divergence_patience: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if self.mode not in ("svi", "map"):
            raise ValueError(f"unknown fit mode {self.mode!r}")


@dataclass
class VariationalState:
    mu: np.ndarray
    log_sigma: np.ndarray
    step: int = 0

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


def one_cycle_lr(step: int, total: int, max_lr: float, warmup_frac: float = 0.3,
                 div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warmup to max_lr at warmup_frac of steps, cosine decay after.

    lr(0) = max_lr / div_factor; the terminal value is max_lr / final_div.
    """
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    peak = warmup_frac * total
    start = max_lr / div_factor
    final = max_lr / final_div
    if step <= peak:
        if peak == 0:
            return max_lr
        t = step / peak
        return start + (max_lr - start) * 0.5 * (1.0 - np.cos(np.pi * t))
    t = (step - peak) / (total - peak)
    return final + (max_lr - final) * 0.5 * (1.0 + np.cos(np.pi * t))


_ENTROPY_CONST = 0.5 * np.log(2.0 * np.pi * np.e)


def elbo_and_grad(state: VariationalState, log_joint, rng: np.random.Generator,
                  mc_samples: int = 1):
    """Single-draw reparameterized ELBO estimate and exact (mu, log sigma) grads.

    theta = mu + sigma * eps with eps ~ N(0, I); the Gaussian entropy term
    sum(log sigma) + d/2 log(2 pi e) is exact, so its log-sigma gradient
    contributes a constant one per coordinate.
    """
    sigma = state.sigma
    d = state.mu.size
    value = 0.0
    g_mu = np.zeros(d)
    g_ls = np.zeros(d)
    for _ in range(mc_samples):
        eps = rng.standard_normal(d)
        theta = state.mu + sigma * eps
        lj, g_theta = log_joint.value_and_grad(theta)
        value += lj
        g_mu += g_theta
        g_ls += g_theta * sigma * eps
    value /= mc_samples
    g_mu /= mc_samples
    g_ls /= mc_samples
    entropy = float(np.sum(state.log_sigma) + d * _ENTROPY_CONST)
    value += entropy
    g_ls += 1.0
    if not np.isfinite(value):
        raise FloatingPointError("non-finite ELBO; state snapshot: "
                                 f"|mu|max={np.abs(state.mu).max():.3e}, "
                                 f"|sigma|max={sigma.max():.3e}")
    return value, g_mu, g_ls


@dataclass
class FitResult:
    state: VariationalState
    trace: np.ndarray          # per-iteration objective (ELBO or log joint)
    config: FitConfig
    spec: ModelSpec
    model: LogJoint
    runtime_seconds: float


def run_svi(objective, dim: int, cfg: FitConfig, mu0: np.ndarray,
            log_sigma0: np.ndarray | None = None):
    """Adam ascent on the ELBO (or the raw objective for MAP).

    ``objective`` exposes ``value_and_grad(theta)``.  Returns the final
    state and the per-iteration objective trace.  Non-finite objectives
    for ``divergence_patience`` consecutive steps abort with the trace.
    """
    is_map = cfg.mode == "map"
    state = VariationalState(
        mu0.copy(),
        np.full(dim, np.log(cfg.init_sigma)) if log_sigma0 is None
        else log_sigma0.copy(),
        0)
    rng = np.random.default_rng(cfg.seed)
    n_par = dim if is_map else 2 * dim
    m1 = np.zeros(n_par)
    m2 = np.zeros(n_par)
    trace = np.empty(cfg.iterations)
    bad_streak = 0
    for it in range(cfg.iterations):
        try:
            if is_map:
                value, grad = objective.value_and_grad(state.mu)
            else:
                value, g_mu, g_ls = elbo_and_grad(state, objective, rng, cfg.mc_samples)
                grad = np.concatenate([g_mu, g_ls])
        except FloatingPointError:
            value, grad = -np.inf, np.zeros(n_par)
        trace[it] = value
        if not np.isfinite(value):
            bad_streak += 1
            if bad_streak >= cfg.divergence_patience:
                raise FloatingPointError(
                    f"objective non-finite for {bad_streak} consecutive steps at "
                    f"iteration {it}; trace tail: {trace[max(0, it - 20):it + 1]}")
            continue
        bad_streak = 0

        lr = one_cycle_lr(it, cfg.iterations, cfg.max_lr, cfg.warmup_frac,
                          cfg.div_factor, cfg.final_div)
        m1 = cfg.adam_beta1 * m1 + (1 - cfg.adam_beta1) * grad
        m2 = cfg.adam_beta2 * m2 + (1 - cfg.adam_beta2) * grad * grad
        hat1 = m1 / (1 - cfg.adam_beta1 ** (it + 1))
        hat2 = m2 / (1 - cfg.adam_beta2 ** (it + 1))
        step_vec = lr * hat1 / (np.sqrt(hat2) + cfg.adam_eps)
        if is_map:
            state.mu = state.mu + step_vec
        else:
            state.mu = state.mu + step_vec[:dim]
            state.log_sigma = state.log_sigma + step_vec[dim:]
        state.step = it + 1
    if is_map:
        # point estimate: effectively zero posterior scale
        state.log_sigma = np.full(dim, -30.0)
    return state, trace


def fit(spec: ModelSpec, data: SurveyTensor, pop: PopulationTable,
        cfg: FitConfig, likelihood_mask: np.ndarray | None = None) -> FitResult:
    """Build the log joint for (spec, data, pop) and run the optimizer."""
    model = LogJoint(spec, data, pop, likelihood_mask=likelihood_mask)
    t0 = time.perf_counter()
    state, trace = run_svi(model, model.dim, cfg, model.init_theta())
    runtime = time.perf_counter() - t0
    return FitResult(state, trace, cfg, spec, model, runtime)


@dataclass
class PosteriorSamples:
    """Posterior draws mapped through the model pipeline.

    ``gamma`` is (n, A, A), ``delta`` and ``m`` are (n, K, K, A, A) in
    complete mode and (n, K, A, A) in partial mode, ``phi`` is (n,).
    ``theta`` keeps the raw unconstrained draws.
    """

    mode: str
    gamma: np.ndarray
    delta: np.ndarray
    m: np.ndarray
    phi: np.ndarray
    theta: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.gamma.shape[0]

    def draw(self, i: int) -> ContactMatrixSet:
        """One posterior draw as a validated contact matrix set."""
        return ContactMatrixSet(self.gamma[i], self.delta[i], self.m[i],
                                float(self.phi[i]))

    def summarize(self, lo: float = 2.5, hi: float = 97.5) -> dict:
        out = {}
        for name in ("gamma", "delta", "m", "phi"):
            arr = getattr(self, name)
            out[name] = {
                "mean": arr.mean(axis=0),
                "lo": np.percentile(arr, lo, axis=0),
                "hi": np.percentile(arr, hi, axis=0),
            }
        return out


def sample_posterior(result: FitResult, draws: int | None = None,
                     rng: np.random.Generator | None = None) -> PosteriorSamples:
    """Draw theta ~ N(mu, diag sigma^2) and map through the model.

    Constraints hold pathwise: every draw's delta satisfies consistency
    (and reciprocity in complete mode) because the parameterization, not
    the optimizer, enforces them.
    """
    model = result.model
    n = draws if draws is not None else result.config.posterior_draws
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=result.config.seed, spawn_key=(1,)))
    state = result.state
    eps = rng.standard_normal((n, model.dim))
    thetas = state.mu[None, :] + state.sigma[None, :] * eps

    first = model.map_parameters(thetas[0])
    gamma = np.empty((n,) + first["gamma"].shape)
    delta = np.empty((n,) + first["delta"].shape)
    m = np.empty((n,) + first["m"].shape)
    phi = np.empty(n)
    for i in range(n):
        mp = model.map_parameters(thetas[i]) if i else first
        gamma[i] = mp["gamma"]
        delta[i] = mp["delta"]
        m[i] = mp["m"]
        phi[i] = mp["phi"]
    return PosteriorSamples(model.spec.mode, gamma, delta, m, phi, thetas)


def elbo_trace_slope(trace: np.ndarray, tail_frac: float = 0.1) -> float:
    """Least-squares slope of the objective over the trailing fraction.

    A convergence smoke check: the tail slope of a converged run is
    statistically indistinguishable from (or below) zero.
    """
    tail = trace[int(len(trace) * (1 - tail_frac)):]
    tail = tail[np.isfinite(tail)]
    if tail.size < 2:
        return 0.0
    x = np.arange(tail.size, dtype=float)
    x -= x.mean()
    return float((x @ (tail - tail.mean())) / (x @ x))
