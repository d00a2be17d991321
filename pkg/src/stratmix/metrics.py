"""Scoring: error metrics, proper interval scores, and k-fold ELPD.

Cross-validation assigns aggregated cells (not respondents) to folds by
stable hashing, fits on the training cells and evaluates the log
posterior-predictive density of the held-out counts by averaging the
count likelihood over posterior draws.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .domain import PopulationTable, SurveyTensor
from .inference import FitConfig, fit, sample_posterior
from .model import ModelSpec


def mape(estimate: np.ndarray, truth: np.ndarray, return_excluded: bool = False):
    """Mean absolute percentage error over cells with positive truth."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    valid = tru > 0
    excluded = int(valid.size - valid.sum())
    if not np.any(valid):
        raise ValueError("no cells with positive truth")
    value = float(100.0 * np.mean(np.abs(est[valid] - tru[valid]) / tru[valid]))
    if return_excluded:
        return value, excluded
    return value


def rmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    e = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(e * e)))


def interval_score(lower: np.ndarray, upper: np.ndarray, truth: np.ndarray,
                   level: float = 0.95) -> float:
    """Mean interval score: width plus 2/alpha-weighted miss penalties."""
    lo = np.asarray(lower, dtype=float)
    up = np.asarray(upper, dtype=float)
    tr = np.asarray(truth, dtype=float)
    if np.any(lo > up):
        raise ValueError("lower bound exceeds upper bound")
    a = 1.0 - level
    score = (up - lo) \
        + (2.0 / a) * (lo - tr) * (tr < lo) \
        + (2.0 / a) * (tr - up) * (tr > up)
    return float(np.mean(score))


def coverage(lower: np.ndarray, upper: np.ndarray, truth: np.ndarray) -> float:
    """Percentage of cells whose truth falls inside [lower, upper]."""
    inside = (truth >= lower) & (truth <= upper)
    return float(100.0 * np.mean(inside))


def _cell_fold(indices: tuple[int, ...], seed: int, folds: int) -> int:
    payload = ",".join(map(str, indices)) + f"|{seed}"
    digest = hashlib.sha256(payload.encode()).digest()
    return int.from_bytes(digest[:8], "big") % folds


def fold_assignment(data: SurveyTensor, folds: int, seed: int) -> np.ndarray:
    """Stable fold index per cell, in the flattened-stratum (F, A, A) layout."""
    K, A = data.space.K_star, data.grid.A
    if data.mode == "complete":
        out = np.empty((K * K, A, A), dtype=int)
        for s in range(K):
            for t in range(K):
                for a in range(A):
                    for b in range(A):
                        out[s * K + t, a, b] = _cell_fold((s, t, a, b), seed, folds)
    else:
        out = np.empty((K, A, A), dtype=int)
        for s in range(K):
            for a in range(A):
                for b in range(A):
                    out[s, a, b] = _cell_fold((s, a, b), seed, folds)
    return out


def _nb_logpmf_grid(y: np.ndarray, mu: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """log NB(y | mu, phi) broadcast over a leading draw axis."""
    return (gammaln(y + phi) - gammaln(phi) - gammaln(y + 1)
            + phi * np.log(phi / (phi + mu)) + y * np.log(mu / (phi + mu)))


@dataclass
class ElpdResult:
    elpd: float
    se: float
    pointwise: np.ndarray      # per held-out cell, ordered by (fold, cell)
    cell_ids: list[tuple]      # matching cell index tuples
    failed_folds: list[int]


def kfold_elpd(spec: ModelSpec, data: SurveyTensor, pop: PopulationTable,
               cfg: FitConfig, folds: int = 5, seed: int | None = None,
               draws: int = 400) -> ElpdResult:
    """K-fold expected log predictive density of one model.

    Cells are hashed to folds; each fold is refit without its cells and
    scored on them via the log-mean of the NB likelihood over posterior
    draws.  Models compared on identical data share fold assignments
    (same seed), so pointwise values pair up across candidates.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    seed = cfg.seed if seed is None else seed
    assign = fold_assignment(data, folds, seed)
    K, A = data.space.K_star, data.grid.A
    F = K * K if data.mode == "complete" else K
    Y = data.Y.reshape(F, A, A)
    pointwise = []
    cell_ids = []
    failed = []
    for f in range(folds):
        train_mask = assign != f
        try:
            res = fit(spec, data, pop, cfg, likelihood_mask=train_mask)
        except FloatingPointError:
            failed.append(f)
            continue
        post = sample_posterior(res, draws=draws)
        model = res.model
        held = (~train_mask) & (model.n_src > 0)
        idx = np.argwhere(held)
        if idx.size == 0:
            continue
        mus = np.empty((post.n_draws, idx.shape[0]))
        for d in range(post.n_draws):
            mu_full = model.expected_counts(post.theta[d]).reshape(F, A, A)
            mus[d] = mu_full[held]
        ys = Y[held]
        ll = _nb_logpmf_grid(ys[None, :], mus, post.phi[:, None])
        lpd = logsumexp(ll, axis=0) - np.log(post.n_draws)
        pointwise.extend(lpd.tolist())
        for row in idx:
            cell_ids.append(tuple(int(v) for v in row))
    pointwise = np.asarray(pointwise)
    n = pointwise.size
    se = float(np.sqrt(n * np.var(pointwise, ddof=1))) if n > 1 else 0.0
    return ElpdResult(float(pointwise.sum()), se, pointwise, cell_ids, failed)


def elpd_compare(a: ElpdResult, b: ElpdResult):
    """Paired ELPD difference (a - b) with its standard error."""
    ids_a = {cid: i for i, cid in enumerate(a.cell_ids)}
    common = [cid for cid in b.cell_ids if cid in ids_a]
    if not common:
        raise ValueError("no overlapping held-out cells to compare")
    ids_b = {cid: i for i, cid in enumerate(b.cell_ids)}
    da = np.array([a.pointwise[ids_a[c]] for c in common])
    db = np.array([b.pointwise[ids_b[c]] for c in common])
    diff = da - db
    n = diff.size
    se = float(np.sqrt(n * np.var(diff, ddof=1))) if n > 1 else 0.0
    return float(diff.sum()), se
