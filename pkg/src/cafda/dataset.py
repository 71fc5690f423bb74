"""Daily sensor profiles: loading, validation, filtering and missingness.

Data are read from a long-format CSV with one row per (day, time) pair::

    day,time,u,temp,humidity
    2018-10-02,1.0,6.123,11.5,
    2018-10-02,2.0,,11.2,88

``day`` is an ISO date or an integer day index, ``time`` is the hour of the
day in ``(0, 24]`` (midnight is 24.0 of the previous day), ``u`` is the
system output and every further column is a covariate. Empty cells and the
literal ``NA`` mean missing; missing values are held as NaN.
"""

from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyDataError, ParseError, ValidationError

MISSING_TOKENS = frozenset({"", "NA"})
DEFAULT_SCHEMA = {"day": "day", "time": "time", "output": "u"}


def day_of_year(day_id) -> float:
    """Day of the year in ``[1, 366]``.

    Integer day ids count from 1 = January 1st in a 365-day year.
    """
    if isinstance(day_id, _dt.date):
        return float(day_id.timetuple().tm_yday)
    return float((int(day_id) - 1) % 365 + 1)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Observation:
    day_id: object
    t: float
    u: float
    covariates: Mapping[str, float]


@dataclass(frozen=True, eq=False)
class DayProfile:
    """All measurements of one day, sorted by time of day.

    ``u`` and every covariate array are aligned with ``t``; NaN marks a
    missing cell.
    """

    day_id: object
    t: np.ndarray
    u: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    d: float = None

    def __post_init__(self):
        t = _frozen(self.t)
        order = np.argsort(t, kind="stable")
        if np.any(np.diff(t[order]) <= 0):
            raise ValidationError(f"day {self.day_id}: duplicate time points")
        object.__setattr__(self, "t", _frozen(t[order]))
        object.__setattr__(self, "u", _frozen(np.asarray(self.u, dtype=float)[order]))
        covs = {k: _frozen(np.asarray(v, dtype=float)[order]) for k, v in self.covariates.items()}
        for k, v in covs.items():
            if v.shape != t.shape:
                raise ValidationError(f"day {self.day_id}: covariate {k!r} has wrong length")
        object.__setattr__(self, "covariates", covs)
        if self.d is None:
            object.__setattr__(self, "d", day_of_year(self.day_id))

    def __len__(self):
        return self.t.size

    @property
    def observations(self):
        return [
            Observation(self.day_id, float(self.t[i]), float(self.u[i]),
                        {k: float(v[i]) for k, v in self.covariates.items()})
            for i in range(self.t.size)
        ]

    def complete_mask(self, covariates: Sequence[str] = (), output=True) -> np.ndarray:
        mask = np.ones(self.t.size, dtype=bool)
        if output:
            mask &= np.isfinite(self.u)
        for name in covariates:
            mask &= np.isfinite(self.covariates[name])
        return mask

    def subset(self, mask) -> DayProfile:
        mask = np.asarray(mask)
        return DayProfile(self.day_id, self.t[mask], self.u[mask],
                          {k: v[mask] for k, v in self.covariates.items()}, self.d)

    def __eq__(self, other):
        if not isinstance(other, DayProfile):
            return NotImplemented
        return (
            self.day_id == other.day_id
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.u, other.u, equal_nan=True)
            and self.covariates.keys() == other.covariates.keys()
            and all(np.array_equal(v, other.covariates[k], equal_nan=True) for k, v in self.covariates.items())
        )

    __hash__ = None


@dataclass(frozen=True)
class FunctionalDataset:
    profiles: tuple
    covariate_names: tuple = ()

    def __post_init__(self):
        profiles = tuple(sorted(self.profiles, key=lambda p: _day_key(p.day_id)))
        ids = [p.day_id for p in profiles]
        if len(set(ids)) != len(ids):
            raise ValidationError("day ids are not unique")
        names = tuple(self.covariate_names)
        for p in profiles:
            if set(p.covariates) != set(names):
                raise ValidationError(f"day {p.day_id}: covariates {sorted(p.covariates)} != {sorted(names)}")
        object.__setattr__(self, "profiles", profiles)
        object.__setattr__(self, "covariate_names", names)

    def __len__(self):
        return len(self.profiles)

    def __iter__(self):
        return iter(self.profiles)

    @property
    def day_ids(self):
        return [p.day_id for p in self.profiles]

    @property
    def n_observations(self):
        return sum(len(p) for p in self.profiles)

    @property
    def missing_fraction(self) -> float:
        return missing_report(self).overall

    def __getitem__(self, day_id) -> DayProfile:
        for p in self.profiles:
            if p.day_id == day_id:
                return p
        raise KeyError(day_id)


def _day_key(day_id):
    if isinstance(day_id, _dt.date):
        return (1, day_id.toordinal())
    return (0, int(day_id))


def _parse_day(text, line):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return _dt.date.fromisoformat(text)
    except ValueError:
        raise ParseError(f"cannot parse day {text!r}", line) from None


def _parse_value(text, line, column):
    text = text.strip()
    if text in MISSING_TOKENS:
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse number {text!r}", line) from None
    if not math.isfinite(value):
        raise ParseError(f"column {column!r}: non-finite value {text!r}", line)
    return value


def load_csv(path, schema: Mapping | None = None) -> FunctionalDataset:
    """Read a long-format CSV into a :class:`FunctionalDataset`.

    Parameters
    ----------
    path : str or Path
    schema : mapping, optional
        Column names for ``day``, ``time`` and ``output`` plus an optional
        ``covariates`` list. By default the columns are ``day,time,u`` and
        every other column is a covariate.

    Raises
    ------
    ParseError
        Malformed row; the message carries the line number.
    ValidationError
        Duplicate (day, time) pair or time outside ``(0, 24]``.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("file is empty, header row required", 1) from None
        for key in ("day", "time", "output"):
            if schema[key] not in header:
                raise ParseError(f"header lacks column {schema[key]!r}", 1)
        fixed = {schema["day"], schema["time"], schema["output"]}
        covs = schema.get("covariates")
        if covs is None:
            covs = [h for h in header if h not in fixed]
        else:
            missing = [c for c in covs if c not in header]
            if missing:
                raise ParseError(f"header lacks covariate column(s) {missing}", 1)
        idx = {h: i for i, h in enumerate(header)}

        rows = {}
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line)
            day = _parse_day(rec[idx[schema["day"]]], line)
            t = _parse_value(rec[idx[schema["time"]]], line, schema["time"])
            if math.isnan(t):
                raise ParseError("time is missing", line)
            if not 0.0 < t <= 24.0:
                raise ValidationError(f"line {line}: time {t} outside (0, 24]")
            u = _parse_value(rec[idx[schema["output"]]], line, schema["output"])
            values = [_parse_value(rec[idx[c]], line, c) for c in covs]
            day_rows = rows.setdefault(day, {})
            if t in day_rows:
                raise ValidationError(f"line {line}: duplicate time {t} for day {day}")
            day_rows[t] = (u, values)

    kinds = {type(d) for d in rows}
    if len(kinds) > 1:
        raise ParseError("day column mixes dates and integer indices")
    profiles = []
    for day, day_rows in rows.items():
        ts = sorted(day_rows)
        u = [day_rows[t][0] for t in ts]
        cov = {c: [day_rows[t][1][k] for t in ts] for k, c in enumerate(covs)}
        profiles.append(DayProfile(day, ts, u, cov))
    return FunctionalDataset(tuple(profiles), tuple(covs))


def _fmt(x):
    return "" if math.isnan(x) else repr(float(x))


def write_csv(ds: FunctionalDataset, path, output_name="u") -> None:
    """Write ``ds`` in the long format understood by :func:`load_csv`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "time", output_name, *ds.covariate_names])
        for p in ds.profiles:
            day = p.day_id.isoformat() if isinstance(p.day_id, _dt.date) else str(p.day_id)
            for i in range(p.t.size):
                w.writerow([day, repr(float(p.t[i])), _fmt(p.u[i]),
                            *(_fmt(p.covariates[c][i]) for c in ds.covariate_names)])


def filter_usable_days(ds: FunctionalDataset, min_points: int, required_covariates: Sequence[str] = ()) -> FunctionalDataset:
    """Keep the days with at least ``min_points`` complete rows.

    A row is complete when the output and every covariate in
    ``required_covariates`` are observed.
    """
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    unknown = set(required_covariates) - set(ds.covariate_names)
    if unknown:
        raise ValidationError(f"unknown covariate(s) {sorted(unknown)}")
    kept = tuple(p for p in ds.profiles if p.complete_mask(required_covariates).sum() >= min_points)
    if not kept:
        raise EmptyDataError(f"no day has {min_points} complete observation(s)")
    return FunctionalDataset(kept, ds.covariate_names)


@dataclass(frozen=True)
class MissingReport:
    per_day: dict
    per_column: dict
    overall: float
    cells: int

    def rows(self):
        return [(day, frac) for day, frac in self.per_day.items()]


def missing_report(ds: FunctionalDataset) -> MissingReport:
    """Missing fractions over the (output + covariates) x rows cell grid."""
    columns = ["u", *ds.covariate_names]
    per_day = {}
    col_missing = dict.fromkeys(columns, 0)
    total_missing = 0
    total_cells = 0
    n_rows = 0
    for p in ds.profiles:
        arrays = [p.u, *(p.covariates[c] for c in ds.covariate_names)]
        miss = [int(np.isnan(a).sum()) for a in arrays]
        cells = p.t.size * len(arrays)
        per_day[p.day_id] = sum(miss) / cells if cells else 0.0
        for c, m in zip(columns, miss):
            col_missing[c] += m
        total_missing += sum(miss)
        total_cells += cells
        n_rows += p.t.size
    per_column = {c: (m / n_rows if n_rows else 0.0) for c, m in col_missing.items()}
    overall = total_missing / total_cells if total_cells else 0.0
    return MissingReport(per_day, per_column, overall, total_cells)
