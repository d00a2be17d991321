"""Sample-mean contact estimator with bootstrap uncertainty.

The classic survey workflow: aggregate counts into coarse age ranges,
divide by respondent counts, apply a post-hoc reciprocity correction,
and bootstrap respondents for uncertainty.  Replicates that resample an
age range down to zero respondents cannot be evaluated; they are skipped
and counted, and a rule-of-thumb coarsening keeps the expected failure
rate below a target.  Pixilation/depixilation move matrices between the
coarse ranges and the 1-year grid for cross-resolution comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import AgeGrid, DataError, PopulationTable, StrataSpace, SurveyRecords


@dataclass(frozen=True)
class AgePartition:
    """Ordered, disjoint index ranges covering the age grid."""

    cells: tuple[tuple[int, ...], ...]  # grid indices per range

    def __post_init__(self):
        seen = []
        for cell in self.cells:
            if len(cell) == 0:
                raise DataError("empty partition cell")
            seen.extend(cell)
        if sorted(seen) != list(range(len(seen))):
            raise DataError("partition must cover the grid disjointly")
        object.__setattr__(self, "cells",
                           tuple(tuple(int(i) for i in c) for c in self.cells))

    @property
    def B(self) -> int:
        return len(self.cells)

    @classmethod
    def from_breaks(cls, grid: AgeGrid, breaks: list[int]) -> "AgePartition":
        """Breakpoints are the first age of each range (must start at the grid min)."""
        idx = grid.index_of(np.asarray(breaks, dtype=int))
        if idx[0] != 0 or np.any(np.diff(idx) <= 0):
            raise DataError("breaks must start at the grid minimum and increase")
        edges = list(idx) + [grid.A]
        cells = tuple(tuple(range(lo, hi)) for lo, hi in zip(edges[:-1], edges[1:]))
        return cls(cells)

    @classmethod
    def singletons(cls, grid: AgeGrid) -> "AgePartition":
        return cls(tuple((i,) for i in range(grid.A)))

    def range_of(self, A: int) -> np.ndarray:
        """Map each grid index to its range index."""
        out = np.empty(A, dtype=int)
        for c, cell in enumerate(self.cells):
            out[list(cell)] = c
        return out


def coarse_population(pop: PopulationTable, part: AgePartition) -> np.ndarray:
    """P^s_c per (stratum, range)."""
    lookup = part.range_of(pop.grid.A)
    out = np.zeros((pop.space.K_star, part.B))
    np.add.at(out.T, lookup, pop.counts.T)
    return out


def coarse_counts(records: SurveyRecords, space: StrataSpace, grid: AgeGrid,
                  part: AgePartition, respondent_subset: np.ndarray | None = None):
    """Aggregate records to coarse cells: (Y (K,K,B,B), N (K,B)).

    ``respondent_subset`` re-weights respondents by multiplicity (the
    bootstrap passes resampled index counts).
    """
    K = space.K_star
    lookup = part.range_of(grid.A)
    B = part.B
    mult = np.ones(records.n_respondents)
    if respondent_subset is not None:
        mult = np.bincount(respondent_subset, minlength=records.n_respondents).astype(float)
    N = np.zeros((K, B))
    np.add.at(N, (records.respondent_stratum, lookup[records.respondent_age]), mult)
    Y = np.zeros((K, K, B, B))
    if records.mode != "complete":
        raise DataError("baseline estimator needs complete records")
    w = mult[records.contact_respondent]
    np.add.at(Y, (records.respondent_stratum[records.contact_respondent],
                  records.contact_stratum,
                  lookup[records.respondent_age[records.contact_respondent]],
                  lookup[records.contact_age]), w)
    return Y, N


def empirical_intensity(Y: np.ndarray, N: np.ndarray) -> np.ndarray:
    """m_hat[s, t, c, d] = Y[s, t, c, d] / N[s, c]; fails on empty ranges.

    The division error on a zero respondent cell is the documented
    failure mode the bootstrap counts.
    """
    if np.any(N <= 0):
        s, c = np.unravel_index(int(np.argmin(N)), N.shape)
        raise ZeroDivisionError(f"no respondents in stratum {s}, age range {c}")
    return Y / N[:, None, :, None]


def reciprocity_adjust(m_hat: np.ndarray, pop_coarse: np.ndarray) -> np.ndarray:
    """Post-hoc reciprocity correction of coarse intensities.

    Within-stratum blocks average with their population-reflected
    transpose; between-stratum blocks average with the reflected
    transpose of the opposite block.  Adjusted rates are reciprocal.
    """
    K, _, B, _ = m_hat.shape
    P = pop_coarse  # (K, B)
    out = np.empty_like(m_hat)
    for s in range(K):
        for t in range(K):
            ratio = P[t][None, :] / P[s][:, None]   # P^t_d / P^s_c
            out[s, t] = 0.5 * (m_hat[s, t] + ratio * m_hat[t, s].T)
    return out


@dataclass
class BootstrapResult:
    point: np.ndarray        # reciprocity-adjusted estimate on the full sample
    mean: np.ndarray
    var: np.ndarray          # spread of replicates around the point estimate
    q_lo: np.ndarray
    q_hi: np.ndarray
    failures: int
    J_effective: int


def bootstrap(records: SurveyRecords, part: AgePartition, space: StrataSpace,
              grid: AgeGrid, pop: PopulationTable, J: int,
              rng: np.random.Generator) -> BootstrapResult:
    """Multinomial respondent bootstrap of the adjusted intensities.

    Replicates with an empty (stratum, range) respondent cell are skipped
    and counted; quantities are summarized over the successful replicates.
    """
    if J < 1:
        raise ValueError("need at least one replicate")
    pc = coarse_population(pop, part)
    Y0, N0 = coarse_counts(records, space, grid, part)
    point = reciprocity_adjust(empirical_intensity(Y0, N0), pc)
    n = records.n_respondents
    reps = []
    failures = 0
    for _ in range(J):
        sample = rng.integers(0, n, size=n)
        Y, N = coarse_counts(records, space, grid, part, respondent_subset=sample)
        if np.any(N <= 0):
            failures += 1
            continue
        reps.append(reciprocity_adjust(Y / N[:, None, :, None], pc))
    if not reps:
        raise RuntimeError(f"all {J} bootstrap replicates failed")
    reps = np.asarray(reps)
    var = np.sum((reps - point) ** 2, axis=0) / max(len(reps) - 1, 1)
    return BootstrapResult(
        point=point,
        mean=reps.mean(axis=0),
        var=var,
        q_lo=np.percentile(reps, 2.5, axis=0),
        q_hi=np.percentile(reps, 97.5, axis=0),
        failures=failures,
        J_effective=len(reps),
    )


def expected_failure_rate(n_per_cell: np.ndarray) -> float:
    """Union-bound estimate of the per-replicate failure probability.

    Sums exp(-N) over every respondent cell; works for per-range vectors
    or stratified (K, B) arrays alike.
    """
    return float(np.sum(np.exp(-np.asarray(n_per_cell, dtype=float))))


def auto_coarsen(part: AgePartition, n_per_age: np.ndarray, alpha: float,
                 J: int) -> tuple[AgePartition, bool]:
    """Merge small ranges until the expected failure mass is below alpha / J.

    Greedy: the range with the smallest respondent count merges into its
    smaller neighbor (ties toward the younger one).  ``n_per_age`` may be
    (A,) or stratified (K, A); with strata the binding count of a range is
    its smallest stratum cell.  Returns the partition and a warning flag
    set when a single range remains and still violates the threshold.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    n_per_age = np.atleast_2d(np.asarray(n_per_age, dtype=float))  # (K, A)
    cells = [list(c) for c in part.cells]

    def per_range():
        return np.stack([n_per_age[:, c].sum(axis=1) for c in cells], axis=1)  # (K, B)

    def binding():
        return per_range().min(axis=0)

    threshold = alpha / J
    while len(cells) > 1 and expected_failure_rate(per_range()) > threshold:
        cnt = binding()
        i = int(np.argmin(cnt))
        if i == 0:
            j = 1
        elif i == len(cells) - 1:
            j = i - 1
        else:
            j = i - 1 if cnt[i - 1] <= cnt[i + 1] else i + 1
        lo, hi = min(i, j), max(i, j)
        cells[lo] = cells[lo] + cells[hi]
        del cells[hi]
    merged = AgePartition(tuple(tuple(c) for c in cells))
    warn = expected_failure_rate(per_range()) > threshold
    return merged, warn


def pixilate(m: np.ndarray, P: np.ndarray, part: AgePartition) -> np.ndarray:
    """Fine intensity -> coarse: population-weighted rows, summed columns."""
    m = np.asarray(m, dtype=float)
    P = np.asarray(P, dtype=float)
    B = part.B
    out = np.empty((B, B))
    for ci, cell_c in enumerate(part.cells):
        w = P[list(cell_c)] / P[list(cell_c)].sum()
        rows = w @ m[list(cell_c), :]
        for di, cell_d in enumerate(part.cells):
            out[ci, di] = rows[list(cell_d)].sum()
    return out


def depixilate(w: np.ndarray, P: np.ndarray, part: AgePartition) -> np.ndarray:
    """Coarse -> fine block-constant projection; pixilate recovers w exactly."""
    w = np.asarray(w, dtype=float)
    P = np.asarray(P, dtype=float)
    A = P.size
    out = np.empty((A, A))
    for ci, cell_c in enumerate(part.cells):
        Pc = P[list(cell_c)].sum()
        for di, cell_d in enumerate(part.cells):
            block = w[ci, di] / (len(cell_c) * len(cell_d))
            for a in cell_c:
                out[a, list(cell_d)] = (Pc / P[a]) * block
    return out
