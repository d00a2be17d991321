"""Synthetic contact survey generator.

Builds stratified demographics from smooth random deviations of a base
age pyramid, ground-truth intensity tensors from mixtures of
setting-specific template surfaces (household / school / work /
community) with reciprocity and consistency enforced by construction,
and overdispersed contact counts via a Gamma-mixed Poisson per
respondent.  Bundled templates are smooth parametric surrogates so tests
and demos are hermetic; real template matrices can be loaded from CSV.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import constraints
from .domain import (AgeGrid, DataError, FeatureSpec, PopulationTable,
                     StrataSpace, SurveyRecords, SurveyTensor, aggregate_survey,
                     intensity_to_rate)

TEMPLATE_NAMES = ("household", "school", "work", "community")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one synthetic survey."""

    grid: AgeGrid
    features: tuple[FeatureSpec, ...]
    n_respondents: int = 1500
    deviation_strength: tuple[float, ...] = ()   # eta_j per feature
    assortativity: tuple[float, ...] = ()        # nu_j per feature
    demographic_scale: tuple[float, ...] = ()    # alpha_j per feature
    mean_intensity: float = 10.0
    base_population: float = 1e5
    template_paths: dict | None = None           # name -> CSV path; bundled if None
    seed: int = 0

    def __post_init__(self):
        J = len(self.features)
        for name in ("deviation_strength", "assortativity", "demographic_scale"):
            vals = getattr(self, name)
            if not vals:
                default = {"deviation_strength": 0.2, "assortativity": 0.0,
                           "demographic_scale": 1.0}[name]
                object.__setattr__(self, name, (default,) * J)
            elif len(vals) != J:
                raise DataError(f"{name} needs one value per feature")
        if self.n_respondents < 1:
            raise DataError("need at least one respondent")
        if self.mean_intensity <= 0:
            raise DataError("mean intensity must be positive")
        if any(e < 0 for e in self.deviation_strength):
            raise DataError("deviation strengths must be nonnegative")

    @property
    def space(self) -> StrataSpace:
        return StrataSpace(self.features)

    @classmethod
    def from_json(cls, payload: dict) -> "ScenarioConfig":
        grid = AgeGrid.from_range(int(payload["age_min"]), int(payload["age_max"]))
        feats = tuple(FeatureSpec(f["name"], tuple(f["categories"]))
                      for f in payload.get("features", []))
        return cls(
            grid=grid,
            features=feats,
            n_respondents=int(payload.get("n_respondents", 1500)),
            deviation_strength=tuple(payload.get("deviation_strength", [])),
            assortativity=tuple(payload.get("assortativity", [])),
            demographic_scale=tuple(payload.get("demographic_scale", [])),
            mean_intensity=float(payload.get("mean_intensity", 10.0)),
            base_population=float(payload.get("base_population", 1e5)),
            template_paths=payload.get("template_paths"),
            seed=int(payload.get("seed", 0)),
        )

    def to_json(self) -> dict:
        return {
            "age_min": int(self.grid.ages[0]),
            "age_max": int(self.grid.ages[-1]),
            "features": [{"name": f.name, "categories": list(f.categories)}
                         for f in self.features],
            "n_respondents": self.n_respondents,
            "deviation_strength": list(self.deviation_strength),
            "assortativity": list(self.assortativity),
            "demographic_scale": list(self.demographic_scale),
            "mean_intensity": self.mean_intensity,
            "base_population": self.base_population,
            "template_paths": self.template_paths,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class GroundTruth:
    """Complete synthetic truth; passes the constraint checker by construction."""

    pop: PopulationTable
    gamma: np.ndarray        # (A, A) baseline rate
    delta: np.ndarray        # (K, K, A, A)
    m: np.ndarray            # (K, K, A, A)
    eta: np.ndarray          # (K, K, A, A)

    @property
    def m_partial(self) -> np.ndarray:
        return self.m.sum(axis=1)


def default_templates(grid: AgeGrid) -> dict[str, np.ndarray]:
    """Smooth, strictly positive surrogate template intensity surfaces.

    Household: band diagonal plus parent-child bands offset by ~27 years.
    School: diagonal bump concentrated at the young end of the grid.
    Work: plateau over working ages.  Community: broad smooth background.
    """
    x = grid.ages.astype(float)
    a = x[:, None]
    b = x[None, :]
    diff = a - b
    household = (np.exp(-(diff / 5.0) ** 2)
                 + 0.6 * np.exp(-((np.abs(diff) - 27.0) / 6.0) ** 2))
    young = x[0] + 0.15 * (x[-1] - x[0])
    school = (np.exp(-(diff / 4.0) ** 2)
              * np.exp(-((a - young) / 9.0) ** 2)
              * np.exp(-((b - young) / 9.0) ** 2))
    work_band = 1.0 / (1.0 + np.exp(-(x - 25.0) / 3.0)) \
        * (1.0 - 1.0 / (1.0 + np.exp(-(x - 62.0) / 3.0)))
    work = np.outer(work_band, work_band) * np.exp(-(diff / 30.0) ** 2)
    community = np.exp(-(diff / 25.0) ** 2) + 0.3
    out = {}
    for name, t in zip(TEMPLATE_NAMES, (household, school, work, community)):
        t = t + 0.02 * t.max()  # strictly positive: deviations take logs
        out[name] = t / t.mean()
    return out


def load_templates(paths: dict[str, str], grid: AgeGrid) -> dict[str, np.ndarray]:
    out = {}
    for name in TEMPLATE_NAMES:
        if name not in paths:
            raise DataError(f"missing template path for {name!r}")
        t = np.loadtxt(paths[name], delimiter=",")
        if t.shape != (grid.A, grid.A):
            raise DataError(f"template {name!r} shape {t.shape} != ({grid.A}, {grid.A})")
        if np.any(t < 0):
            raise DataError(f"template {name!r} has negative entries")
        out[name] = t
    return out


def _se_kernel(x: np.ndarray, amplitude: float = 1.0, lengthscale: float = 3.0,
               jitter: float = 1e-9) -> np.ndarray:
    d = x[:, None] - x[None, :]
    return amplitude * np.exp(-0.5 * (d / lengthscale) ** 2) + jitter * np.eye(x.size)


def synth_demographics(base_pop: np.ndarray, features: tuple[FeatureSpec, ...],
                       alpha_scales: tuple[float, ...], rng: np.random.Generator,
                       grid: AgeGrid | None = None) -> PopulationTable:
    """Stratified population from smooth softmax-of-GP category shares.

    Per feature, K_j deviation curves are drawn from a squared-exponential
    Gaussian process (amplitude 1, lengthscale 3) over the age grid and
    passed through a softmax scaled by alpha_j.  Composite cells multiply
    the per-feature shares, are rounded to the nearest integer and floored
    at 1 so every stratum keeps positive population.
    """
    base_pop = np.asarray(base_pop, dtype=float)
    if np.any(base_pop <= 0):
        raise DataError("base population must be positive")
    A = base_pop.size
    if grid is None:
        grid = AgeGrid.from_range(0, A - 1)
    grid_x = np.arange(A, dtype=float)
    cov = _se_kernel(grid_x)
    chol = np.linalg.cholesky(cov)
    space = StrataSpace(features)
    shares = []  # per feature: (K_j, A)
    for feat, scale in zip(features, alpha_scales):
        z = chol @ rng.standard_normal((A, feat.K))  # (A, K_j)
        logits = scale * z.T
        logits = logits - logits.max(axis=0, keepdims=True)
        e = np.exp(logits)
        shares.append(e / e.sum(axis=0, keepdims=True))
    counts = np.empty((space.K_star, A))
    for s in range(space.K_star):
        cats = space.category_tuple(s) if features else ()
        frac = np.ones(A)
        for j, c in enumerate(cats):
            frac = frac * shares[j][c]
        counts[s] = np.maximum(np.rint(base_pop * frac), 1.0)
    return PopulationTable(counts, space, grid)


def template_mixture(templates: dict[str, np.ndarray], pop_totals: np.ndarray,
                     rng: np.random.Generator, mean_intensity: float) -> np.ndarray:
    """Dirichlet(1,1,1,1)-weighted template blend, scaled to a target mean.

    The scale makes the population-weighted mean row sum (expected
    contacts per person) equal ``mean_intensity``.
    """
    mats = [np.asarray(templates[name], dtype=float) for name in TEMPLATE_NAMES]
    weights = rng.dirichlet(np.ones(len(mats)))
    T = sum(w * t for w, t in zip(weights, mats))
    if not np.any(T > 0):
        raise DataError("template mixture is identically zero")
    pw = pop_totals / pop_totals.sum()
    current = float(pw @ T.sum(axis=1))
    return T * (mean_intensity / current)


def reciprocity_correct(M: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Average an intensity matrix with its population-reflected transpose.

    The result satisfies diag(P) @ M_tilde symmetric (total contacts
    balance), and is a fixed point when M is already reciprocal.
    """
    M = np.asarray(M, dtype=float)
    P = np.asarray(P, dtype=float)
    return 0.5 * (M + (P[None, :] / P[:, None]) * M.T)


def deviation_tensor(templates: dict[str, np.ndarray], K: int, strength: float,
                     assort: float, rng: np.random.Generator) -> np.ndarray:
    """Reciprocal multiplicative deviation tensor (K^2, A, A) for one feature.

    Each category pair k <= l gets a fresh template mixture, log-centered
    to mean zero, exponentiated with the given strength, and boosted on
    within-category blocks by the assortativity parameter.  Off-diagonal
    pairs are filled by transposition, diagonal blocks symmetrized by an
    elementwise geometric mean.
    """
    if strength < 0:
        raise DataError("deviation strength must be nonnegative")
    some = templates[TEMPLATE_NAMES[0]]
    A = some.shape[0]
    flat_pop = np.ones(A)
    out = np.empty((K * K, A, A))
    for k in range(K):
        for l in range(k, K):
            T = template_mixture(templates, flat_pop, rng, 1.0)
            if np.any(T <= 0):
                raise DataError("deviation template has nonpositive cells; log undefined")
            E = np.log(T)
            E = E - E.mean()
            D = np.exp(strength * E + (assort if k == l else 0.0))
            if k == l:
                D = np.sqrt(D * D.T)
                out[k * K + k] = D
            else:
                out[k * K + l] = D
                out[l * K + k] = D.T
    return out


def compose_ground_truth(gamma: np.ndarray, deviations: list[np.ndarray],
                         pop: PopulationTable) -> GroundTruth:
    """Combine the baseline rate and per-feature deviations into full truth.

    Composite deviations are the product of per-feature factors; fiber
    normalization against the population proportion weights enforces
    consistency exactly, after which m = gamma * delta * P_target.
    """
    space = pop.space
    K = space.K_star
    A = pop.grid.A
    if deviations:
        logs = [np.log(d) for d in deviations]
        d = np.exp(constraints.kronecker_sum_mode1(logs))
    else:
        d = np.ones((1, A, A))
    prop = constraints.proportion_tensor(pop, "complete")
    denom = (d * prop.s).sum(axis=0, keepdims=True)
    delta = d / denom
    # m[(s,t),a,b] = gamma[a,b] * delta[(s,t),a,b] * P^t_b
    ptgt = np.broadcast_to(pop.counts[None, :, None, :], (K, K, A, A)).reshape(K * K, A, A)
    m = gamma[None, :, :] * delta * ptgt
    delta4 = delta.reshape(K, K, A, A)
    m4 = m.reshape(K, K, A, A)
    eta = m4 / m4.sum(axis=1, keepdims=True)
    return GroundTruth(pop, gamma, delta4, m4, eta)


def baseline_rate(templates: dict[str, np.ndarray], pop: PopulationTable,
                  rng: np.random.Generator, mean_intensity: float) -> np.ndarray:
    """Template mixture -> reciprocity-corrected intensity -> rate matrix."""
    M = template_mixture(templates, pop.totals, rng, mean_intensity)
    M = reciprocity_correct(M, pop.totals)
    return intensity_to_rate(M, pop.totals)


def draw_respondents(pop: PopulationTable, n: int, rng: np.random.Generator):
    """Representative respondents: age from the population marginal, stratum
    from the within-age composite proportions."""
    totals = pop.totals
    page = totals / totals.sum()
    ages = rng.choice(pop.grid.A, size=n, p=page)
    strata = np.empty(n, dtype=int)
    prop = pop.proportions  # (K, A)
    for a in np.unique(ages):
        sel = ages == a
        strata[sel] = rng.choice(pop.space.K_star, size=int(sel.sum()), p=prop[:, a])
    return ages.astype(int), strata


def simulate_counts(truth: GroundTruth, ages: np.ndarray, strata: np.ndarray,
                    rng: np.random.Generator):
    """Gamma-mixed Poisson contact counts for each respondent.

    One mean-one Gamma(5, 5) effect per respondent multiplies all of their
    expected intensities, giving the overdispersion seen in real surveys.
    Returns per-respondent count arrays (n, K, A) plus the respondent
    frailties.
    """
    n = ages.size
    K = truth.pop.space.K_star
    A = truth.pop.grid.A
    zeta = rng.gamma(shape=5.0, scale=1.0 / 5.0, size=n)
    counts = np.empty((n, K, A), dtype=np.int64)
    for i in range(n):
        lam = truth.m[strata[i], :, ages[i], :] * zeta[i]
        counts[i] = rng.poisson(lam)
    return counts, zeta


def records_from_counts(ages: np.ndarray, strata: np.ndarray,
                        counts: np.ndarray) -> SurveyRecords:
    """Expand per-respondent count arrays into flat contact records."""
    n, K, A = counts.shape
    resp_idx, tgt_s, tgt_a = np.nonzero(counts)
    reps = counts[resp_idx, tgt_s, tgt_a]
    contact_respondent = np.repeat(resp_idx, reps)
    contact_stratum = np.repeat(tgt_s, reps)
    contact_age = np.repeat(tgt_a, reps)
    return SurveyRecords(ages, strata, contact_respondent, contact_age, contact_stratum)


@dataclass
class ScenarioBundle:
    config: ScenarioConfig
    pop: PopulationTable
    truth: GroundTruth
    records: SurveyRecords
    survey_complete: SurveyTensor
    survey_partial: SurveyTensor


def simulate_scenario(cfg: ScenarioConfig) -> ScenarioBundle:
    """Full pipeline: demographics, ground truth, respondents, counts."""
    rng = np.random.default_rng(cfg.seed)
    grid = cfg.grid
    A = grid.A
    x = np.linspace(0.0, 1.0, A)
    base = cfg.base_population * (1.0 - 0.35 * x)  # gently declining pyramid
    pop = synth_demographics(base, cfg.features, cfg.demographic_scale, rng, grid)

    if cfg.template_paths:
        templates = load_templates(cfg.template_paths, grid)
    else:
        templates = default_templates(grid)
    gamma = baseline_rate(templates, pop, rng, cfg.mean_intensity)
    deviations = [
        deviation_tensor(templates, f.K, cfg.deviation_strength[j],
                         cfg.assortativity[j], rng)
        for j, f in enumerate(cfg.features)
    ]
    truth = compose_ground_truth(gamma, deviations, pop)

    ages, strata = draw_respondents(pop, cfg.n_respondents, rng)
    counts, _ = simulate_counts(truth, ages, strata, rng)
    records = records_from_counts(ages, strata, counts)
    complete = aggregate_survey(records, cfg.space, grid)
    partial = complete.to_partial()
    return ScenarioBundle(cfg, pop, truth, records, complete, partial)
