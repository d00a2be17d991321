"""CSV and JSON interchange for surveys, populations, and fit outputs.

File formats:

* ``population.csv``: age, one column per feature, count.
* ``respondents.csv``: respondent_id, age, one column per feature.
* ``contacts_complete.csv``: respondent_id, contact_age, contact_<feature>...
* ``contacts_partial.csv``: respondent_id, contact_age.
* ``meta.json``: age range, features with category order, column names,
  scenario config echo and its hash.

Column names are configurable through the ``columns`` mapping in
``meta.json``; omitted entries fall back to the defaults below.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .domain import (AgeGrid, DataError, FeatureSpec, PopulationTable,
                     StrataSpace, SurveyRecords)

DEFAULT_COLUMNS = {
    "age": "age",
    "count": "count",
    "respondent_id": "respondent_id",
    "contact_age": "contact_age",
    "contact_feature_prefix": "contact_",
}


class ConfigError(ValueError):
    """Raised when a JSON config violates its schema."""


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _columns(meta: dict) -> dict:
    cols = dict(DEFAULT_COLUMNS)
    cols.update(meta.get("columns", {}))
    return cols


def space_from_meta(meta: dict) -> tuple[AgeGrid, StrataSpace]:
    try:
        grid = AgeGrid.from_range(int(meta["age_min"]), int(meta["age_max"]))
        feats = tuple(FeatureSpec(f["name"], tuple(f["categories"]))
                      for f in meta.get("features", []))
    except KeyError as exc:
        raise ConfigError(f"meta.json missing key {exc}") from exc
    return grid, StrataSpace(feats)


# --------------------------------------------------------------------- #
# writing
# --------------------------------------------------------------------- #
def write_population_csv(path: Path, pop: PopulationTable, columns: dict | None = None):
    cols = {**DEFAULT_COLUMNS, **(columns or {})}
    space, grid = pop.space, pop.grid
    rows = []
    for s in range(space.K_star):
        cats = space.category_tuple(s)
        for ai, age in enumerate(grid.ages):
            row = {cols["age"]: int(age)}
            for f, c in zip(space.features, cats):
                row[f.name] = f.categories[c]
            row[cols["count"]] = pop.counts[s, ai]
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False)


def write_survey_csvs(out_dir: Path, records: SurveyRecords, space: StrataSpace,
                      grid: AgeGrid, columns: dict | None = None):
    cols = {**DEFAULT_COLUMNS, **(columns or {})}
    ages = grid.ages
    resp = {cols["respondent_id"]: np.arange(records.n_respondents),
            cols["age"]: ages[records.respondent_age]}
    for j, f in enumerate(space.features):
        cat_idx = [space.category_tuple(s)[j] for s in records.respondent_stratum]
        resp[f.name] = [f.categories[c] for c in cat_idx]
    pd.DataFrame(resp).to_csv(out_dir / "respondents.csv", index=False)

    base = {cols["respondent_id"]: records.contact_respondent,
            cols["contact_age"]: ages[records.contact_age]}
    partial = pd.DataFrame(base)
    partial.to_csv(out_dir / "contacts_partial.csv", index=False)
    if records.contact_stratum is not None:
        complete = dict(base)
        pref = cols["contact_feature_prefix"]
        for j, f in enumerate(space.features):
            cat_idx = [space.category_tuple(t)[j] for t in records.contact_stratum]
            complete[pref + f.name] = [f.categories[c] for c in cat_idx]
        pd.DataFrame(complete).to_csv(out_dir / "contacts_complete.csv", index=False)


def write_tensor_csv(path: Path, tensor: np.ndarray, index_names: list[str],
                     value_name: str = "value"):
    """Long-format CSV of a dense tensor, one row per cell."""
    tensor = np.asarray(tensor)
    grids = np.indices(tensor.shape).reshape(tensor.ndim, -1)
    frame = {name: grids[i] for i, name in enumerate(index_names)}
    frame[value_name] = tensor.ravel()
    pd.DataFrame(frame).to_csv(path, index=False)


def read_tensor_csv(path: Path, index_names: list[str],
                    value_name: str = "value") -> np.ndarray:
    df = pd.read_csv(path)
    shape = tuple(int(df[n].max()) + 1 for n in index_names)
    out = np.zeros(shape)
    out[tuple(df[n].to_numpy() for n in index_names)] = df[value_name].to_numpy()
    return out


# --------------------------------------------------------------------- #
# reading
# --------------------------------------------------------------------- #
def _category_lookup(space: StrataSpace):
    return [{c: i for i, c in enumerate(f.categories)} for f in space.features]


def _strata_from_frame(df: pd.DataFrame, space: StrataSpace, col_names: list[str],
                       file_label: str) -> np.ndarray:
    lookups = _category_lookup(space)
    idx = np.zeros(len(df), dtype=int)
    for j, (f, col) in enumerate(zip(space.features, col_names)):
        if col not in df.columns:
            raise DataError(f"{file_label}: missing feature column {col!r}")
        vals = df[col].astype(str)
        unknown = ~vals.isin(lookups[j].keys())
        if unknown.any():
            bad = vals[unknown].iloc[0]
            raise DataError(f"{file_label}: unknown category {bad!r} for feature {f.name!r}")
        idx = idx * f.K + vals.map(lookups[j]).to_numpy()
    return idx


def read_population_csv(path: Path, space: StrataSpace, grid: AgeGrid,
                        columns: dict | None = None) -> PopulationTable:
    cols = {**DEFAULT_COLUMNS, **(columns or {})}
    df = pd.read_csv(path)
    for c in (cols["age"], cols["count"]):
        if c not in df.columns:
            raise DataError(f"population file missing column {c!r}")
    age_idx = grid.index_of(df[cols["age"]].to_numpy())
    strata = _strata_from_frame(df, space, [f.name for f in space.features],
                                "population file")
    counts = np.zeros((space.K_star, grid.A))
    np.add.at(counts, (strata, age_idx), df[cols["count"]].to_numpy(dtype=float))
    return PopulationTable(counts, space, grid)


def read_survey_csvs(data_dir: Path, space: StrataSpace, grid: AgeGrid,
                     mode: str, columns: dict | None = None) -> SurveyRecords:
    cols = {**DEFAULT_COLUMNS, **(columns or {})}
    rf = data_dir / "respondents.csv"
    if not rf.exists():
        raise DataError(f"missing respondents file {rf}")
    rdf = pd.read_csv(rf)
    if cols["age"] not in rdf.columns:
        raise DataError(f"respondents file missing column {cols['age']!r}")
    resp_age = grid.index_of(rdf[cols["age"]].to_numpy())
    resp_strata = _strata_from_frame(rdf, space, [f.name for f in space.features],
                                     "respondents file")
    if cols["respondent_id"] in rdf.columns:
        id_map = {int(v): i for i, v in enumerate(rdf[cols["respondent_id"]])}
    else:
        id_map = {i: i for i in range(len(rdf))}

    cf = data_dir / ("contacts_complete.csv" if mode == "complete"
                     else "contacts_partial.csv")
    if not cf.exists():
        raise DataError(f"no {mode}-mode contacts file at {cf}; "
                        f"check --mode against the available data")
    cdf = pd.read_csv(cf)
    if cols["respondent_id"] in cdf.columns:
        try:
            contact_resp = np.array([id_map[int(v)]
                                     for v in cdf[cols["respondent_id"]]],
                                    dtype=int)
        except KeyError as exc:
            raise DataError(f"contact references unknown respondent id {exc}") from exc
    else:
        # contacts carry their respondent's own (age, features); attribute
        # each row to a matching respondent (any match is equivalent for
        # aggregation, which only needs the (stratum, age) cell)
        if cols["age"] not in cdf.columns:
            raise DataError(f"contacts file needs either {cols['respondent_id']!r} "
                            f"or respondent ({cols['age']!r}, feature) columns")
        own_age = grid.index_of(cdf[cols["age"]].to_numpy())
        own_strata = _strata_from_frame(cdf, space, [f.name for f in space.features],
                                        "contacts file")
        cell_to_resp = {}
        for i, (a, s) in enumerate(zip(resp_age, resp_strata)):
            cell_to_resp.setdefault((int(s), int(a)), i)
        try:
            contact_resp = np.array([cell_to_resp[(int(s), int(a))]
                                     for s, a in zip(own_strata, own_age)],
                                    dtype=int)
        except KeyError as exc:
            raise DataError(f"contact row references a respondent cell with no "
                            f"respondents: (stratum, age index) {exc}") from exc
    contact_age = grid.index_of(cdf[cols["contact_age"]].to_numpy())
    contact_strata = None
    if mode == "complete":
        pref = cols["contact_feature_prefix"]
        names = [pref + f.name for f in space.features]
        missing = [n for n in names if n not in cdf.columns]
        if missing and space.features:
            raise DataError(f"complete-mode contacts file lacks feature columns {missing}")
        for n in names:
            if cdf[n].isna().any():
                raise DataError(f"contacts file mixes rows with and without "
                                f"feature information (nulls in {n!r}); contact "
                                f"features must be all-or-none")
        contact_strata = _strata_from_frame(cdf, space, names, "contacts file")
    if len(cdf) == 0:
        contact_resp = np.zeros(0, dtype=int)
        contact_age = np.zeros(0, dtype=int)
        contact_strata = np.zeros(0, dtype=int) if mode == "complete" else None
    return SurveyRecords(resp_age, resp_strata, contact_resp, contact_age,
                         contact_strata)


# --------------------------------------------------------------------- #
# fit outputs
# --------------------------------------------------------------------- #
def write_summaries_csv(path: Path, summaries: dict, mode: str):
    """Long-format posterior summaries: quantity, indices, mean, q2.5, q97.5."""
    rows = []

    def emit(name, stats, index_names):
        mean = np.atleast_1d(stats["mean"])
        lo = np.atleast_1d(stats["lo"])
        hi = np.atleast_1d(stats["hi"])
        grids = np.indices(mean.shape).reshape(mean.ndim, -1)
        for flat in range(mean.size):
            row = {"quantity": name}
            for i, idx_name in enumerate(index_names):
                row[idx_name] = int(grids[i, flat])
            row["mean"] = mean.ravel()[flat]
            row["q025"] = lo.ravel()[flat]
            row["q975"] = hi.ravel()[flat]
            rows.append(row)

    emit("gamma", summaries["gamma"], ["a", "b"])
    if mode == "complete":
        emit("delta", summaries["delta"], ["s", "t", "a", "b"])
        emit("m", summaries["m"], ["s", "t", "a", "b"])
    else:
        emit("delta", summaries["delta"], ["s", "a", "b"])
        emit("m", summaries["m"], ["s", "a", "b"])
    emit("phi", summaries["phi"], [])
    df = pd.DataFrame(rows)
    front = ["quantity", "s", "t", "a", "b", "mean", "q025", "q975"]
    df = df.reindex(columns=[c for c in front if c in df.columns])
    df.to_csv(path, index=False)


def write_draws_csv(path: Path, post, thin: int = 1):
    """Posterior draws in long format: draw, quantity, indices, value."""
    rows = []
    for name in ("gamma", "delta", "m", "phi"):
        arr = getattr(post, name)
        for d in range(0, arr.shape[0], thin):
            cell = np.atleast_1d(arr[d])
            grids = np.indices(cell.shape).reshape(cell.ndim, -1)
            flat = cell.ravel()
            for j in range(flat.size):
                idx = ";".join(str(int(grids[i, j])) for i in range(cell.ndim))
                rows.append({"draw": d, "quantity": name,
                             "indices": idx, "value": flat[j]})
    pd.DataFrame(rows).to_csv(path, index=False)


def summaries_to_json(summaries: dict, mode: str) -> dict:
    """JSON-serializable posterior summaries (lists, not arrays)."""
    out = {"mode": mode}
    for name, stats in summaries.items():
        out[name] = {k: np.asarray(v).tolist() for k, v in stats.items()}
    return out


def trace_to_json(trace: np.ndarray) -> dict:
    return {"objective": np.asarray(trace).tolist()}


def write_ngm_csv(path: Path, ngm: np.ndarray):
    """Dense next-generation matrix, one CSV row per matrix row."""
    np.savetxt(path, np.asarray(ngm), delimiter=",", fmt="%.17g")


def read_ngm_csv(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=float)


def write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"missing file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
