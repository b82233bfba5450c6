"""Population data containers and file I/O.

Long CSV layout: required header columns ID, TIME, DV, DVID (1-based,
mapping to the model's observation order), any further columns are
per-individual constant covariates.  Missing observations are ".".
The JSON mirror nests {id, rules, observations: [{t, y: [...]}]}.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import ModelError, ValidatedModel

__all__ = ["DataError", "IndividualData", "PopulationData", "BoundProblem",
           "read_population", "write_population", "bind"]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class IndividualData:
    """One individual: strictly increasing times, (n_times, n_obs) values
    with NaN marking missing entries, and covariate bindings."""

    id: str
    times: np.ndarray
    obs: np.ndarray
    rules: dict

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        obs = np.asarray(self.obs, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[0] != times.shape[0]:
            raise DataError(
                f"individual {self.id!r}: obs must be (n_times, n_obs)")
        if times.size and np.any(np.diff(times) <= 0):
            raise DataError(f"individual {self.id!r}: times must be strictly increasing")
        if times.size and np.any(np.all(np.isnan(obs), axis=1)):
            raise DataError(
                f"individual {self.id!r}: time point with no observed entries")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "obs", obs)

    @property
    def n_times(self):
        return len(self.times)

    @property
    def n_observed(self):
        return int(np.sum(~np.isnan(self.obs)))


@dataclass(frozen=True)
class PopulationData:
    individuals: tuple

    def __post_init__(self):
        ids = [ind.id for ind in self.individuals]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate individual ids: {dup}")
        if not ids:
            raise DataError("population is empty")

    @property
    def n_individuals(self):
        return len(self.individuals)

    @property
    def n_observations(self):
        return sum(ind.n_observed for ind in self.individuals)

    def covariate_names(self):
        names = set()
        for ind in self.individuals:
            names |= set(ind.rules)
        return sorted(names)


def _fmt(x) -> str:
    if math.isnan(x):
        return "."
    return repr(float(x))


def read_population(path_or_text, fmt=None) -> PopulationData:
    """Load a population dataset from CSV or JSON (by extension or ``fmt``)."""
    if hasattr(path_or_text, "read"):
        text = path_or_text.read()
        if fmt is None:
            raise DataError("fmt required when reading from a stream")
    else:
        path = str(path_or_text)
        if fmt is None:
            fmt = "json" if path.lower().endswith(".json") else "csv"
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    if fmt == "csv":
        return _read_csv(text)
    if fmt == "json":
        return _read_json(text)
    raise DataError(f"unknown format {fmt!r}")


def _read_csv(text) -> PopulationData:
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise DataError("empty CSV")
    header = [h.strip() for h in rows[0]]
    required = ["ID", "TIME", "DV", "DVID"]
    for col in required:
        if col not in header:
            raise DataError(f"CSV is missing required column {col!r}")
    cov_cols = [h for h in header if h not in required]
    if cov_cols:
        warnings.warn(f"treating extra column(s) as covariates: {cov_cols}")
    idx = {h: i for i, h in enumerate(header)}

    per_id = {}
    order = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        def cell(col):
            try:
                return row[idx[col]].strip()
            except IndexError:
                raise DataError(f"CSV line {lineno}: short row") from None
        iid = cell("ID")
        try:
            t = float(cell("TIME"))
            dvid = int(cell("DVID"))
        except ValueError:
            raise DataError(f"CSV line {lineno}: bad TIME/DVID") from None
        if dvid < 1:
            raise DataError(f"CSV line {lineno}: DVID must be 1-based")
        dv_raw = cell("DV")
        dv = math.nan if dv_raw in (".", "") else float(dv_raw)
        key = (iid, t, dvid)
        if key in seen:
            raise DataError(
                f"CSV line {lineno}: duplicate (ID, TIME, DVID) = {key}")
        seen.add(key)
        if iid not in per_id:
            per_id[iid] = {"times": [], "vals": {}, "rules": {}}
            order.append(iid)
            for col in cov_cols:
                v = cell(col)
                try:
                    per_id[iid]["rules"][col] = float(v)
                except ValueError:
                    raise DataError(
                        f"CSV line {lineno}: bad covariate {col}={v!r}") from None
        else:
            for col in cov_cols:
                try:
                    v = float(cell(col))
                except ValueError:
                    raise DataError(f"CSV line {lineno}: bad covariate value")
                if v != per_id[iid]["rules"][col]:
                    raise DataError(
                        f"CSV line {lineno}: covariate {col} is not constant "
                        f"for individual {iid!r}")
        rec = per_id[iid]
        if rec["times"] and t < rec["times"][-1]:
            raise DataError(
                f"CSV line {lineno}: non-monotone times for individual {iid!r}")
        if not rec["times"] or t != rec["times"][-1]:
            rec["times"].append(t)
        rec["vals"][(t, dvid)] = dv

    max_dvid = max((dvid for rec in per_id.values()
                    for (_, dvid) in rec["vals"]), default=1)
    individuals = []
    for iid in order:
        rec = per_id[iid]
        times, kept_rows = [], []
        for t in rec["times"]:
            row = [rec["vals"].get((t, d), math.nan) for d in range(1, max_dvid + 1)]
            if all(math.isnan(v) for v in row):
                warnings.warn(
                    f"individual {iid!r}: dropping time {t} with no observed entries")
                continue
            times.append(t)
            kept_rows.append(row)
        individuals.append(IndividualData(
            id=iid, times=np.asarray(times),
            obs=np.asarray(kept_rows, dtype=np.float64).reshape(len(times), max_dvid),
            rules=dict(rec["rules"])))
    return PopulationData(individuals=tuple(individuals))


def _read_json(text) -> PopulationData:
    doc = json.loads(text)
    individuals = []
    for rec in doc["individuals"]:
        times = [float(o["t"]) for o in rec["observations"]]
        obs = [[math.nan if v is None else float(v) for v in o["y"]]
               for o in rec["observations"]]
        individuals.append(IndividualData(
            id=str(rec["id"]), times=np.asarray(times),
            obs=np.asarray(obs, dtype=np.float64),
            rules={k: float(v) for k, v in rec.get("rules", {}).items()}))
    return PopulationData(individuals=tuple(individuals))


def write_population(pop: PopulationData, path, fmt=None) -> None:
    path = str(path)
    if fmt is None:
        fmt = "json" if path.lower().endswith(".json") else "csv"
    if fmt == "csv":
        text = to_csv(pop)
    elif fmt == "json":
        text = to_json(pop)
    else:
        raise DataError(f"unknown format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def to_csv(pop: PopulationData) -> str:
    cov_cols = pop.covariate_names()
    out = io.StringIO()
    out.write(",".join(["ID", "TIME", "DV", "DVID"] + cov_cols) + "\n")
    for ind in pop.individuals:
        covs = [_fmt(ind.rules.get(c, math.nan)) for c in cov_cols]
        for i, t in enumerate(ind.times):
            for d in range(ind.obs.shape[1]):
                v = ind.obs[i, d]
                if math.isnan(v) and ind.obs.shape[1] > 1:
                    continue  # absent DVID at this time
                out.write(",".join([ind.id, _fmt(t), _fmt(v), str(d + 1)] + covs)
                          + "\n")
    return out.getvalue()


def to_json(pop: PopulationData) -> str:
    doc = {"individuals": [
        {"id": ind.id,
         "rules": {k: ind.rules[k] for k in sorted(ind.rules)},
         "observations": [
             {"t": float(t),
              "y": [None if math.isnan(v) else float(v) for v in ind.obs[i]]}
             for i, t in enumerate(ind.times)]}
        for ind in pop.individuals]}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


@dataclass(frozen=True)
class BoundProblem:
    """A validated model bound to a dataset, ready for estimation.

    Carries per-individual covariate vectors and missing-pattern masks in
    the model's observation order.
    """

    model: ValidatedModel
    data: PopulationData
    covariate_values: tuple      # tuple of vectors, model.covariates order
    masks: tuple                 # tuple of (n_times, n_obs) bool arrays

    @property
    def n_individuals(self):
        return self.data.n_individuals

    @property
    def n_observations(self):
        return self.data.n_observations


def bind(model: ValidatedModel, data: PopulationData) -> BoundProblem:
    """Pair model and data; every model covariate must be bound per id."""
    cov_values = []
    masks = []
    for ind in data.individuals:
        vals = []
        for name in model.covariates:
            if name not in ind.rules:
                raise DataError(
                    f"individual {ind.id!r} is missing covariate {name!r}")
            vals.append(float(ind.rules[name]))
        cov_values.append(np.asarray(vals, dtype=np.float64))
        if ind.obs.shape[1] > model.n_obs:
            raise DataError(
                f"individual {ind.id!r} has {ind.obs.shape[1]} observation "
                f"columns but the model defines {model.n_obs}")
        obs = ind.obs
        if obs.shape[1] < model.n_obs:
            pad = np.full((obs.shape[0], model.n_obs - obs.shape[1]), np.nan)
            obs = np.hstack([obs, pad])
            object.__setattr__(ind, "obs", obs)
        masks.append(~np.isnan(obs))
    return BoundProblem(model=model, data=data,
                        covariate_values=tuple(cov_values), masks=tuple(masks))
