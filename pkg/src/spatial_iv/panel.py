"""Location-by-year panels reduced to per-location decadal trends.

The input CSV has a header ``location_id, lon, lat, year`` followed by one
column per variable; empty cells are missing. Each variable becomes a
per-location least-squares slope on ``(year - anchor) / 10``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spatial_iv.errors import PanelError
from spatial_iv.geo import SiteSet, practical_range
from spatial_iv.iv import CausalDataset
from spatial_iv.regress import gp_mle_fit, make_design, spatial_fraction

KEY_COLUMNS = ("location_id", "lon", "lat", "year")
TRANSFORMS = ("identity", "log")


class TransformError(PanelError):
    pass


@dataclass(frozen=True)
class PanelRecord:
    location_id: str
    lon: float
    lat: float
    year: int
    values: dict
    line: int = 0


def _num(text, line, column):
    try:
        v = float(text)
    except ValueError:
        raise PanelError(f"line {line}: column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise PanelError(f"line {line}: column {column!r}: not finite: {text!r}")
    return v


def read_panel(path) -> tuple:
    """Parse a panel CSV; returns (records, variable names)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        if tuple(header[:4]) != KEY_COLUMNS:
            raise PanelError(f"line 1: header must start with {', '.join(KEY_COLUMNS)}, got {header[:4]}")
        variables = header[4:]
        if not variables:
            raise PanelError("line 1: no variable columns after the key columns")
        if len(set(variables)) != len(variables):
            raise PanelError("line 1: duplicate variable columns")
        records = []
        seen = set()
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            loc = row[0].strip()
            if not loc:
                raise PanelError(f"line {line}: empty location_id")
            lon = _num(row[1], line, "lon")
            lat = _num(row[2], line, "lat")
            year_f = _num(row[3], line, "year")
            if year_f != int(year_f):
                raise PanelError(f"line {line}: column 'year': not an integer: {row[3]!r}")
            year = int(year_f)
            if (loc, year) in seen:
                raise PanelError(f"line {line}: duplicate record for location {loc!r} year {year}")
            seen.add((loc, year))
            values = {
                v: (math.nan if not cell.strip() else _num(cell, line, v))
                for v, cell in zip(variables, row[4:])
            }
            records.append(PanelRecord(loc, lon, lat, year, values, line))
    return records, variables


def _transform(value, kind, rec, var):
    if kind == "identity":
        return value
    if kind == "log":
        if value <= 0:
            raise TransformError(
                f"line {rec.line}: location {rec.location_id!r} year {rec.year}: "
                f"cannot log nonpositive {var}={value}"
            )
        return math.log(value)
    raise PanelError(f"unknown transform {kind!r} for {var!r}; expected one of {TRANSFORMS}")


@dataclass
class SlopeDataset:
    """Per-location slopes with coordinates and the role of each column.

    ``columns`` maps an output column (Z, A, Y, A_intercept, Y_intercept,
    X_*) to its array; ``dropped`` lists (location_id, reason).
    """

    location_id: list
    lon: np.ndarray
    lat: np.ndarray
    columns: dict
    dropped: list = field(default_factory=list)

    @property
    def sites(self) -> SiteSet:
        return SiteSet(np.column_stack([self.lon, self.lat]))

    def to_causal(self) -> CausalDataset:
        for k in ("Z", "A", "Y"):
            if k not in self.columns:
                raise PanelError(f"slope dataset has no {k!r} column")
        cov, stages = {}, {}
        for name, v in self.columns.items():
            if name == "A_intercept":
                cov[name], stages[name] = v, "stage1"
            elif name == "Y_intercept":
                cov[name], stages[name] = v, "stage2"
            elif name.startswith("X_"):
                cov[name], stages[name] = v, "both"
        return CausalDataset(
            z=self.columns["Z"], a=self.columns["A"], y=self.columns["Y"], sites=self.sites,
            covariates=cov, covariate_stages=stages,
        )

    def write_csv(self, path):
        names = list(self.columns)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location_id", "lon", "lat", *names])
            for i, loc in enumerate(self.location_id):
                w.writerow([loc, repr(float(self.lon[i])), repr(float(self.lat[i])),
                            *(repr(float(self.columns[n][i])) for n in names)])

    def write_drop_log(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location_id", "reason"])
            w.writerows(self.dropped)

    @classmethod
    def read_csv(cls, path) -> "SlopeDataset":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[:3] != ["location_id", "lon", "lat"]:
                raise PanelError(f"{path}: line 1: header must start with location_id, lon, lat")
            names = header[3:]
            ids, rows = [], []
            for row in reader:
                if len(row) != len(header):
                    raise PanelError(f"{path}: line {reader.line_num}: expected {len(header)} fields")
                ids.append(row[0])
                rows.append([_num(c, reader.line_num, h) for c, h in zip(row[1:], header[1:])])
        arr = np.asarray(rows, dtype=float).reshape(len(rows), len(header) - 1)
        return cls(ids, arr[:, 0], arr[:, 1], {n: arr[:, 2 + i] for i, n in enumerate(names)})


def decadal_slopes(
    records,
    anchor_year: int,
    roles: dict,
    transforms: dict | None = None,
    covariates: list | None = None,
    min_years: int = 2,
) -> SlopeDataset:
    """Fit a per-location OLS line on (year - anchor) / 10 for each role.

    ``roles`` maps Z, A and Y to panel variables. The A and Y intercepts are
    kept as ``A_intercept`` (stage-1 covariate) and ``Y_intercept`` (stage-2
    covariate). ``covariates`` are panel variables whose slopes enter both
    stages as ``X_<name>``. A location is dropped, and logged, when any
    variable has fewer than ``min_years`` usable years.
    """
    transforms = transforms or {}
    covariates = list(covariates or [])
    missing = {"Z", "A", "Y"} - set(roles)
    if missing:
        raise PanelError(f"roles: missing {sorted(missing)}")
    wanted = {**{r: v for r, v in roles.items()}, **{f"X_{c}": c for c in covariates}}
    by_loc = {}
    for rec in records:
        by_loc.setdefault(rec.location_id, []).append(rec)
    ids, lon, lat, dropped = [], [], [], []
    cols = {k: [] for k in ("Z", "A", "Y", "A_intercept", "Y_intercept", *(f"X_{c}" for c in covariates))}
    for loc in sorted(by_loc):
        recs = sorted(by_loc[loc], key=lambda r: r.year)
        coords = {(r.lon, r.lat) for r in recs}
        if len(coords) > 1:
            raise PanelError(f"location {loc!r}: inconsistent coordinates across years")
        fits, reason = {}, None
        for role, var in wanted.items():
            if var not in recs[0].values:
                raise PanelError(f"roles: unknown panel variable {var!r}")
            kind = transforms.get(var, "identity")
            t, y = [], []
            for r in recs:
                val = r.values[var]
                if math.isnan(val):
                    continue
                t.append((r.year - anchor_year) / 10.0)
                y.append(_transform(val, kind, r, var))
            if len(set(t)) < min_years:
                reason = f"{var}: {len(set(t))} usable year(s), need {min_years}"
                break
            slope, intercept = np.polyfit(np.asarray(t), np.asarray(y), 1)
            fits[role] = (float(slope), float(intercept))
        if reason:
            dropped.append((loc, reason))
            continue
        ids.append(loc)
        lon.append(recs[0].lon)
        lat.append(recs[0].lat)
        for role, (slope, intercept) in fits.items():
            cols[role].append(slope)
        cols["A_intercept"].append(fits["A"][1])
        cols["Y_intercept"].append(fits["Y"][1])
    if len(ids) < 3:
        raise PanelError(f"only {len(ids)} location(s) survived; need at least 3")
    return SlopeDataset(
        ids, np.asarray(lon), np.asarray(lat), {k: np.asarray(v) for k, v in cols.items()}, dropped
    )


def spatial_diagnostics(dataset, variable: str, min_sites: int = 25) -> tuple:
    """Intercept-only GP fit of one column.

    Returns (CovarianceSpec, practical range, spatial fraction). ``dataset``
    is a SlopeDataset, or a ``(values, sites)`` pair.
    """
    if isinstance(dataset, SlopeDataset):
        if variable not in dataset.columns:
            raise PanelError(f"unknown column {variable!r}; have {sorted(dataset.columns)}")
        values, sites = dataset.columns[variable], dataset.sites
    else:
        values, sites = dataset
    values = np.asarray(values, dtype=float)
    if values.size < min_sites:
        raise PanelError(f"spatial diagnostics need at least {min_sites} locations, got {values.size}")
    spec = gp_mle_fit(make_design(values, {}), sites).cov_params
    return spec, practical_range(spec.range), spatial_fraction(spec)


def synthetic_panel(path, slopes: dict, coords, years=(1990, 2000, 2010), anchor_year=1990,
                    intercepts: dict | None = None, noise_sd: float = 0.0, seed=None):
    """Write a panel CSV whose per-location trends are ``slopes``.

    Each variable is ``intercept + slope * (year - anchor) / 10`` plus
    optional i.i.d. noise. Returns the list of location ids.
    """
    rng = np.random.default_rng(seed)
    coords = np.asarray(coords, dtype=float)
    names = list(slopes)
    intercepts = intercepts or {}
    n = coords.shape[0]
    ids = [f"L{i:05d}" for i in range(n)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*KEY_COLUMNS, *names])
        for i in range(n):
            for year in years:
                t = (year - anchor_year) / 10.0
                vals = []
                for v in names:
                    b0 = intercepts.get(v, np.zeros(n))[i]
                    x = b0 + slopes[v][i] * t
                    if noise_sd > 0:
                        x += noise_sd * rng.standard_normal()
                    vals.append(repr(float(x)))
                w.writerow([ids[i], repr(float(coords[i, 0])), repr(float(coords[i, 1])), year, *vals])
    return ids
