"""Core domain objects: age grids, strata spaces, populations, survey tensors.

Everything downstream (constraint machinery, the model, the simulator)
builds on the types here.  All objects are immutable after construction
and safe to share across threads; the operations are pure functions.

Conventions used throughout the package:

* ages live on a contiguous 1-year integer grid,
* a composite stratum index ``s`` enumerates the Cartesian product of
  feature categories in row-major order (first feature most significant),
* intensities ``m[a, b]`` count contacts *from* age ``a`` *to* age ``b``,
  and rates are ``gamma[a, b] = m[a, b] / P_b``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Raised when survey or population inputs violate a contract."""


@dataclass(frozen=True)
class AgeGrid:
    """Contiguous, strictly increasing 1-year ages (inclusive range)."""

    ages: np.ndarray

    def __post_init__(self):
        ages = np.asarray(self.ages, dtype=int)
        if ages.ndim != 1 or ages.size < 2:
            raise DataError("age grid needs at least 2 ages")
        if not np.all(np.diff(ages) == 1):
            raise DataError("age grid must be contiguous 1-year ages")
        object.__setattr__(self, "ages", ages)

    @classmethod
    def from_range(cls, lo: int, hi: int) -> "AgeGrid":
        return cls(np.arange(lo, hi + 1))

    @property
    def A(self) -> int:
        return int(self.ages.size)

    def index_of(self, age) -> np.ndarray:
        """Map ages to grid indices, rejecting out-of-range values."""
        age = np.asarray(age, dtype=int)
        idx = age - int(self.ages[0])
        bad = (idx < 0) | (idx >= self.A)
        if np.any(bad):
            where = int(np.flatnonzero(bad)[0])
            raise DataError(f"age {age.flat[where]} at position {where} outside grid "
                            f"[{self.ages[0]}, {self.ages[-1]}]")
        return idx


@dataclass(frozen=True)
class FeatureSpec:
    """A categorical stratification feature with >= 2 named categories."""

    name: str
    categories: tuple[str, ...]

    def __post_init__(self):
        cats = tuple(str(c) for c in self.categories)
        if len(cats) < 2:
            raise DataError(f"feature {self.name!r} needs >= 2 categories")
        if len(set(cats)) != len(cats):
            raise DataError(f"feature {self.name!r} has duplicate categories")
        object.__setattr__(self, "categories", cats)

    @property
    def K(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class StrataSpace:
    """Cartesian product of features; composite index <-> category tuple maps.

    Composite index is row-major: the first feature varies slowest.  With no
    features the space has a single stratum (age-only analyses).
    """

    features: tuple[FeatureSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")

    @property
    def K_star(self) -> int:
        out = 1
        for f in self.features:
            out *= f.K
        return out

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(f.K for f in self.features)

    def composite_index(self, cats) -> int:
        """Tuple of per-feature category indices -> composite stratum index."""
        cats = tuple(int(c) for c in cats)
        if len(cats) != len(self.features):
            raise DataError(f"expected {len(self.features)} category indices, got {len(cats)}")
        idx = 0
        for c, f in zip(cats, self.features):
            if not 0 <= c < f.K:
                raise DataError(f"category index {c} out of range for feature {f.name!r}")
            idx = idx * f.K + c
        return idx

    def category_tuple(self, s: int) -> tuple[int, ...]:
        """Composite stratum index -> tuple of per-feature category indices."""
        if not 0 <= s < self.K_star:
            raise DataError(f"stratum index {s} out of range (K*={self.K_star})")
        out = []
        for f in reversed(self.features):
            out.append(s % f.K)
            s //= f.K
        return tuple(reversed(out))

    def labels(self) -> list[tuple[str, ...]]:
        return list(itertools.product(*(f.categories for f in self.features)))


@dataclass(frozen=True)
class PopulationTable:
    """Population counts P^s_a (strata x ages); totals P_a are the row sums.

    Counts are stored as reals: external sources publish smoothed,
    non-integer series.  Every age must have positive total population.
    """

    counts: np.ndarray  # (K_star, A)
    space: StrataSpace
    grid: AgeGrid

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (self.space.K_star, self.grid.A):
            raise DataError(f"population counts shape {counts.shape} != "
                            f"({self.space.K_star}, {self.grid.A})")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise DataError("population counts must be finite and nonnegative")
        if np.any(counts.sum(axis=0) <= 0):
            a = int(np.flatnonzero(counts.sum(axis=0) <= 0)[0])
            raise DataError(f"total population is zero at age {self.grid.ages[a]}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def totals(self) -> np.ndarray:
        """P_a: marginal population per age (sum over strata)."""
        return self.counts.sum(axis=0)

    @property
    def proportions(self) -> np.ndarray:
        """P^s_a / P_a, shape (K_star, A)."""
        return self.counts / self.totals


@dataclass(frozen=True)
class SurveyTensor:
    """Aggregated survey counts.

    ``Y`` is (K*, K*, A, A) in complete mode (respondent stratum, contact
    stratum, respondent age, contact age) and (K*, A, A) in partial mode.
    ``N`` is (K*, A) respondent counts.  ``offsets`` are optional log-scale
    adjustments aligned with ``Y`` (defaults to zero); cells with
    ``N[s, a] == 0`` must carry zero counts.
    """

    mode: str  # "complete" | "partial"
    Y: np.ndarray
    N: np.ndarray
    space: StrataSpace
    grid: AgeGrid
    offsets: np.ndarray | None = None

    def __post_init__(self):
        K, A = self.space.K_star, self.grid.A
        Y = np.asarray(self.Y)
        N = np.asarray(self.N, dtype=float)
        if self.mode not in ("complete", "partial"):
            raise DataError(f"unknown survey mode {self.mode!r}")
        want = (K, K, A, A) if self.mode == "complete" else (K, A, A)
        if Y.shape != want:
            raise DataError(f"Y shape {Y.shape} != {want} for {self.mode} mode")
        if N.shape != (K, A):
            raise DataError(f"N shape {N.shape} != {(K, A)}")
        if np.any(Y < 0) or np.any(N < 0):
            raise DataError("counts must be nonnegative")
        zero = N == 0
        ysum = Y.sum(axis=(1, 3)) if self.mode == "complete" else Y.sum(axis=2)
        if np.any(ysum[zero] != 0):
            raise DataError("nonzero contact counts in cells with zero respondents")
        off = self.offsets
        if off is not None:
            off = np.asarray(off, dtype=float)
            if off.shape != Y.shape:
                raise DataError(f"offsets shape {off.shape} != Y shape {Y.shape}")
            off.setflags(write=False)
        Y = Y.astype(float)
        Y.setflags(write=False)
        N.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "N", N)
        object.__setattr__(self, "offsets", off)

    @property
    def total_contacts(self) -> float:
        return float(self.Y.sum())

    def to_partial(self) -> "SurveyTensor":
        """Marginalize a complete tensor over the contact stratum."""
        if self.mode == "partial":
            return self
        off = None
        if self.offsets is not None:
            raise DataError("cannot marginalize offsets; rebuild them for partial mode")
        return SurveyTensor("partial", self.Y.sum(axis=1), self.N,
                            self.space, self.grid, off)


@dataclass(frozen=True)
class SurveyRecords:
    """Respondent-level survey data, the input to aggregation and bootstrap.

    ``contact_stratum`` is None in partial mode (no feature information on
    contacts).  Contact rows point back into the respondent arrays through
    ``contact_respondent``.
    """

    respondent_age: np.ndarray      # (N,) grid indices
    respondent_stratum: np.ndarray  # (N,) composite indices
    contact_respondent: np.ndarray  # (R,) indices into respondents
    contact_age: np.ndarray         # (R,) grid indices
    contact_stratum: np.ndarray | None = None  # (R,) composite indices

    def __post_init__(self):
        for name in ("respondent_age", "respondent_stratum",
                     "contact_respondent", "contact_age"):
            arr = np.asarray(getattr(self, name), dtype=int)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.contact_stratum is not None:
            cs = np.asarray(self.contact_stratum, dtype=int)
            cs.setflags(write=False)
            object.__setattr__(self, "contact_stratum", cs)
        if self.respondent_age.shape != self.respondent_stratum.shape:
            raise DataError("respondent arrays must align")
        if self.contact_respondent.shape != self.contact_age.shape:
            raise DataError("contact arrays must align")
        if self.contact_respondent.size and self.respondent_age.size == 0:
            raise DataError("contacts present but no respondents")
        if self.contact_respondent.size:
            if self.contact_respondent.min() < 0 or \
               self.contact_respondent.max() >= self.respondent_age.size:
                raise DataError("contact_respondent index out of range")

    @property
    def n_respondents(self) -> int:
        return int(self.respondent_age.size)

    @property
    def mode(self) -> str:
        return "partial" if self.contact_stratum is None else "complete"


@dataclass(frozen=True)
class ContactMatrixSet:
    """A coherent set of fitted quantities: rates, modifiers, intensities.

    ``gamma`` is the symmetric A x A baseline rate surface, ``delta`` the
    modifier tensor ((K*, K*, A, A) complete or (K*, A, A) partial), ``m``
    the matching intensities and ``phi`` the global overdispersion.  The
    reciprocity/consistency checks live in :mod:`stratmix.constraints`.
    """

    gamma: np.ndarray
    delta: np.ndarray
    m: np.ndarray
    phi: float

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise DataError("gamma must be square")
        if not np.array_equal(g, g.T):
            raise DataError("gamma must be exactly symmetric")
        if self.phi <= 0:
            raise DataError("phi must be positive")
        if np.any(g <= 0) or np.any(np.asarray(self.delta) <= 0) \
                or np.any(np.asarray(self.m) <= 0):
            raise DataError("gamma, delta, m must be strictly positive")


def aggregate_survey(records: SurveyRecords, space: StrataSpace,
                     grid: AgeGrid) -> SurveyTensor:
    """Sum respondent-level records into a SurveyTensor.

    Mode is inferred from the presence of contact strata (all-or-none; a
    mixture is rejected upstream by SurveyRecords carrying a single field).
    The total of ``Y`` equals the number of contact records, and ``N``
    counts respondents per (stratum, age) cell.
    """
    K, A = space.K_star, grid.A
    ra, rs = records.respondent_age, records.respondent_stratum
    if np.any((ra < 0) | (ra >= A)):
        i = int(np.flatnonzero((ra < 0) | (ra >= A))[0])
        raise DataError(f"respondent {i} age index {ra[i]} outside grid")
    if np.any((rs < 0) | (rs >= K)):
        i = int(np.flatnonzero((rs < 0) | (rs >= K))[0])
        raise DataError(f"respondent {i} stratum index {rs[i]} out of range")
    ca = records.contact_age
    if np.any((ca < 0) | (ca >= A)):
        i = int(np.flatnonzero((ca < 0) | (ca >= A))[0])
        raise DataError(f"contact record {i} age index {ca[i]} outside grid")

    N = np.zeros((K, A))
    np.add.at(N, (rs, ra), 1.0)

    src_s = rs[records.contact_respondent]
    src_a = ra[records.contact_respondent]
    if records.mode == "complete":
        ct = records.contact_stratum
        if np.any((ct < 0) | (ct >= K)):
            i = int(np.flatnonzero((ct < 0) | (ct >= K))[0])
            raise DataError(f"contact record {i} stratum index {ct[i]} out of range")
        Y = np.zeros((K, K, A, A))
        np.add.at(Y, (src_s, ct, src_a, ca), 1.0)
    else:
        Y = np.zeros((K, A, A))
        np.add.at(Y, (src_s, src_a, ca), 1.0)
    return SurveyTensor(records.mode, Y, N, space, grid)


def intensity_to_rate(m: np.ndarray, P: np.ndarray) -> np.ndarray:
    """gamma[a, b] = m[a, b] / P_b."""
    m = np.asarray(m, dtype=float)
    P = np.asarray(P, dtype=float)
    if np.any(P <= 0):
        b = int(np.flatnonzero(P <= 0)[0])
        raise DataError(f"population is zero at age index {b}")
    return m / P[None, :]


def rate_to_intensity(gamma: np.ndarray, P: np.ndarray) -> np.ndarray:
    """m[a, b] = gamma[a, b] * P_b, the inverse of intensity_to_rate."""
    P = np.asarray(P, dtype=float)
    if np.any(P <= 0):
        b = int(np.flatnonzero(P <= 0)[0])
        raise DataError(f"population is zero at age index {b}")
    return np.asarray(gamma, dtype=float) * P[None, :]


def _check_partition(cells: list[np.ndarray], A: int) -> None:
    seen = np.zeros(A, dtype=bool)
    for cell in cells:
        if len(cell) == 0:
            raise DataError("empty partition cell")
        if np.any(seen[cell]):
            raise DataError("partition cells overlap")
        seen[cell] = True
    if not np.all(seen):
        raise DataError("partition does not cover the grid")


def aggregate_intensity(m: np.ndarray, P: np.ndarray,
                        row_merge: list[np.ndarray],
                        col_merge: list[np.ndarray]) -> np.ndarray:
    """Merge intensity rows by population-weighted average, columns by sum.

    ``row_merge`` / ``col_merge`` are disjoint index partitions covering the
    grid.  Rows average with weights P_a / P_cell because intensities are
    per-capita in the source group; columns add because target groups pool.
    """
    m = np.asarray(m, dtype=float)
    P = np.asarray(P, dtype=float)
    rows = [np.asarray(c, dtype=int) for c in row_merge]
    cols = [np.asarray(c, dtype=int) for c in col_merge]
    _check_partition(rows, m.shape[0])
    _check_partition(cols, m.shape[1])
    out = np.empty((len(rows), len(cols)))
    for i, rc in enumerate(rows):
        w = P[rc] / P[rc].sum()
        merged_rows = w @ m[rc, :]
        for j, cc in enumerate(cols):
            out[i, j] = merged_rows[cc].sum()
    return out
