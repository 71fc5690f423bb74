"""Functional additive models for daily profiles.

A model is a list of additive terms, written as strings::

    constant_intercept            overall level alpha_0
    functional_intercept(t)       daily pattern alpha(t)
    seasonal_intercept(t, d)      daily and yearly surface alpha(t, d)
    linear(temp)                  beta * temp
    smooth(temp)                  f(temp)
    varying_smooth(temp, t)       f(temp, t), covariate effect changing over the day
    interaction_smooth(temp, rh)  f(temp, rh)

Smooth terms take optional keyword arguments, e.g. ``smooth(temp, k=20,
order=3)`` for the number of B-splines and the difference-penalty order.
Every smooth is centered so that it sums to zero over the training points;
the constant intercept carries the overall level.

Fitting happens in two stages. Stage 1 assumes independent errors and
yields the residual curves used for FPCA. Stage 2 refits the fixed effects
jointly with day-specific scores on the estimated eigenfunctions, the scores
being ridge-penalized with ``sigma2 / nu_r`` (the BLUP form of the mixed
model).
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from . import _penalized
from .dataset import DayProfile, FunctionalDataset
from .errors import ConfigError, DataError, EmptyDataError, NumericError, SpecError
from .fpca import EigenSystem, ResidualSet
from .splinebasis import (BSplineBasis, ConstraintTransform, centering_transform, data_domain,
                          penalty_for, row_kron)

log = logging.getLogger(__name__)

TIME = "t"
DAY_OF_YEAR = "d"
YEAR_DOMAIN = (0.0, 366.0)

TERM_KINDS = {
    "constant_intercept": 0,
    "functional_intercept": 1,
    "seasonal_intercept": 2,
    "linear": 1,
    "smooth": 1,
    "varying_smooth": 2,
    "interaction_smooth": 2,
}
_ALIASES = {"constant": "constant_intercept", "intercept": "constant_intercept",
            "interaction": "interaction_smooth", "s": "smooth", "te": "interaction_smooth"}
_DEFAULT_VARS = {"constant_intercept": (), "functional_intercept": (TIME,),
                 "seasonal_intercept": (TIME, DAY_OF_YEAR)}
UNSUPPORTED = {"historical", "ffr", "function_on_function", "linear_ffr"}

DEFAULT_K_1D = 10
DEFAULT_K_2D = 8


@dataclass(frozen=True)
class Term:
    kind: str
    variables: tuple = ()
    k: int | None = None
    order: int = 2

    @property
    def num_basis(self):
        if self.k is not None:
            return self.k
        return DEFAULT_K_2D if len(self.variables) == 2 else DEFAULT_K_1D

    @property
    def is_smooth(self):
        return self.kind not in ("constant_intercept", "linear")

    @property
    def covariates(self):
        return tuple(v for v in self.variables if v not in (TIME, DAY_OF_YEAR))

    @property
    def label(self):
        if self.kind == "constant_intercept":
            return self.kind
        return f"{self.kind}({', '.join(self.variables)})"

    def __str__(self):
        extra = []
        if self.k is not None:
            extra.append(f"k={self.k}")
        if self.order != 2:
            extra.append(f"order={self.order}")
        if not extra:
            return self.label
        return f"{self.kind}({', '.join([*self.variables, *extra])})"


_TERM_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def parse_term(text: str) -> Term:
    """Parse a term string such as ``"smooth(temp, k=12)"``."""
    m = _TERM_RE.match(text)
    if not m:
        raise SpecError(f"cannot parse model term {text!r}")
    kind = _ALIASES.get(m.group(1), m.group(1))
    if kind in UNSUPPORTED:
        raise SpecError(f"term {kind!r} (historical / function-on-function effects) is not supported")
    if kind not in TERM_KINDS:
        raise SpecError(f"unknown model term {m.group(1)!r}")
    args = [a.strip() for a in (m.group(2) or "").split(",") if a.strip()]
    variables, opts = [], {}
    for a in args:
        if "=" in a:
            key, val = (x.strip() for x in a.split("=", 1))
            if key not in ("k", "order"):
                raise SpecError(f"unknown option {key!r} in term {text!r}")
            try:
                opts[key] = int(val)
            except ValueError:
                raise SpecError(f"option {key} needs an integer in {text!r}") from None
        else:
            variables.append(a)
    if not variables:
        variables = list(_DEFAULT_VARS.get(kind, ()))
    if len(variables) != TERM_KINDS[kind]:
        raise SpecError(f"term {kind!r} takes {TERM_KINDS[kind]} variable(s), got {variables}")
    if kind == "functional_intercept" and variables != [TIME]:
        raise SpecError("functional_intercept is a function of t only")
    if kind == "seasonal_intercept" and sorted(variables) != sorted([TIME, DAY_OF_YEAR]):
        raise SpecError("seasonal_intercept is a function of (t, d)")
    if kind == "varying_smooth" and variables[1] != TIME:
        raise SpecError("varying_smooth(cov, t) needs t as second variable")
    if kind == "seasonal_intercept":
        variables = [TIME, DAY_OF_YEAR]
    return Term(kind, tuple(variables), opts.get("k"), opts.get("order", 2))


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model: additive terms plus FPCA and monitoring options.

    ``segments`` lists day ids at which a new data segment (with its own
    eigensystem) starts; days before the first boundary form segment 0.
    """

    terms: tuple
    pve_threshold: float = 0.99
    drop_first_scores: int = 0
    segments: tuple = ()

    def __post_init__(self):
        terms = tuple(t if isinstance(t, Term) else parse_term(t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        kinds = [t.kind for t in terms]
        if kinds.count("constant_intercept") != 1:
            raise SpecError("a model needs exactly one constant_intercept")
        if kinds.count("functional_intercept") + kinds.count("seasonal_intercept") > 1:
            raise SpecError("at most one functional or seasonal intercept")
        labels = [t.label for t in terms]
        if len(set(labels)) != len(labels):
            raise SpecError("duplicate model term")
        if not 0 < self.pve_threshold < 1:
            raise ConfigError("pve_threshold must lie in (0, 1)")
        if self.drop_first_scores < 0:
            raise ConfigError("drop_first_scores must be >= 0")
        if len({isinstance(b, _dt.date) for b in self.segments}) > 1:
            raise ConfigError("segment boundaries must be all dates or all day ids")
        object.__setattr__(self, "segments", tuple(sorted(self.segments)))

    @property
    def covariates(self):
        out = []
        for t in self.terms:
            for c in t.covariates:
                if c not in out:
                    out.append(c)
        return tuple(out)

    def segment_of(self, day_id) -> int:
        return int(sum(1 for b in self.segments if day_id >= b))

    @property
    def n_segments(self):
        return len(self.segments) + 1

    def to_dict(self):
        return {"terms": [str(t) for t in self.terms], "pve_threshold": self.pve_threshold,
                "drop_first_scores": self.drop_first_scores,
                "segments": [_day_json(s) for s in self.segments]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["terms"]), float(d.get("pve_threshold", 0.99)),
                   int(d.get("drop_first_scores", 0)), tuple(_day_parse(s) for s in d.get("segments", ())))


def _day_json(day):
    return day.isoformat() if hasattr(day, "isoformat") else int(day)


def _day_parse(v):
    import datetime as dt
    if isinstance(v, str):
        return dt.date.fromisoformat(v)
    return v


# ----------------------------------------------------------------------------
# term bases and design matrices


@dataclass(frozen=True, eq=False)
class TermBasis:
    """Everything needed to evaluate one term's design at new points.

    ``penalties`` live in the constrained coefficient space and are already
    rescaled to the magnitude of the training design.
    """

    term: Term
    bases: tuple = ()
    constraint: ConstraintTransform | None = None
    penalties: tuple = ()

    @property
    def ncol(self):
        if self.term.kind in ("constant_intercept", "linear"):
            return 1
        full = int(np.prod([b.num_basis for b in self.bases]))
        return full - 1 if self.constraint is not None else full

    def raw_design(self, cols: Mapping[str, np.ndarray], clamp=True) -> np.ndarray:
        kind = self.term.kind
        n = len(cols[TIME])
        if kind == "constant_intercept":
            return np.ones((n, 1))
        if kind == "linear":
            return np.asarray(cols[self.term.variables[0]], dtype=float)[:, None]
        mats = []
        for var, basis in zip(self.term.variables, self.bases):
            x = np.asarray(cols[var], dtype=float)
            if clamp:
                out = basis.outside(x)
                if out.any():
                    log.warning("%s: %d point(s) of %r outside [%.4g, %.4g] clamped to the boundary",
                                self.term.label, int(out.sum()), var, basis.lo, basis.hi)
                    x = basis.clip(x)
            mats.append(basis.design(x))
        return mats[0] if len(mats) == 1 else row_kron(*mats)

    def design(self, cols, clamp=True) -> np.ndarray:
        X = self.raw_design(cols, clamp)
        if self.constraint is not None:
            X = self.constraint.apply(X)
        return X

    def full_coef(self, coef):
        """Unconstrained basis coefficients for a constrained coefficient vector."""
        coef = np.asarray(coef, dtype=float)
        return self.constraint.expand(coef) if self.constraint is not None else coef

    def to_dict(self):
        return {
            "term": str(self.term),
            "bases": [b.to_dict() for b in self.bases],
            "constraint": None if self.constraint is None else self.constraint.Z.tolist(),
            "penalties": [P.tolist() for P in self.penalties],
        }

    @classmethod
    def from_dict(cls, d):
        Z = d.get("constraint")
        return cls(parse_term(d["term"]), tuple(BSplineBasis.from_dict(b) for b in d["bases"]),
                   None if Z is None else ConstraintTransform(np.array(Z, dtype=float)),
                   tuple(np.array(P, dtype=float) for P in d["penalties"]))


@dataclass(frozen=True, eq=False)
class TermDesign:
    basis: TermBasis
    X: np.ndarray
    penalties: tuple = ()
    lambdas: tuple = ()

    @property
    def term(self):
        return self.basis.term


@dataclass(frozen=True, eq=False)
class ModelFrame:
    """Usable observations in long form, grouped by day (rows contiguous per day)."""

    day_ids: tuple
    day_index: np.ndarray
    columns: dict
    y: np.ndarray

    @property
    def n(self):
        return self.y.size

    def day_slices(self):
        bounds = np.flatnonzero(np.diff(self.day_index)) + 1
        starts = np.r_[0, bounds]
        stops = np.r_[bounds, self.day_index.size]
        return [slice(a, b) for a, b in zip(starts, stops)]


def day_columns(day: DayProfile, covariates: Sequence[str] = ()) -> dict:
    cols = {TIME: day.t, DAY_OF_YEAR: np.full(day.t.size, day.d)}
    for c in covariates:
        cols[c] = day.covariates[c]
    return cols


def model_frame(spec: ModelSpec, ds: FunctionalDataset) -> ModelFrame:
    unknown = [c for c in spec.covariates if c not in ds.covariate_names]
    if unknown:
        raise SpecError(f"model references unknown covariate(s) {unknown}")
    ids, idx, y = [], [], []
    cols = {TIME: [], DAY_OF_YEAR: [], **{c: [] for c in spec.covariates}}
    for day in ds.profiles:
        mask = day.complete_mask(spec.covariates)
        if not mask.any():
            continue
        k = len(ids)
        ids.append(day.day_id)
        dc = day_columns(day, spec.covariates)
        for name in cols:
            cols[name].append(dc[name][mask])
        y.append(day.u[mask])
        idx.append(np.full(int(mask.sum()), k))
    if not ids:
        raise EmptyDataError("no observation has the output and all model covariates")
    return ModelFrame(tuple(ids), np.concatenate(idx), {k: np.concatenate(v) for k, v in cols.items()},
                      np.concatenate(y))


def _setup_term(term: Term, cols) -> TermBasis:
    if term.kind in ("constant_intercept", "linear"):
        return TermBasis(term)
    bases = []
    for var in term.variables:
        if var == DAY_OF_YEAR:
            bases.append(BSplineBasis(*YEAR_DOMAIN, term.num_basis, cyclic=True))
        else:
            bases.append(BSplineBasis(*data_domain(cols[var]), term.num_basis))
    tb = TermBasis(term, tuple(bases))
    X = tb.raw_design(cols, clamp=False)
    Xc, ct = centering_transform(X)
    if len(bases) == 1:
        raw_pens = [penalty_for(bases[0], term.order)]
    else:
        P1 = penalty_for(bases[0], term.order)
        P2 = penalty_for(bases[1], term.order)
        raw_pens = [np.kron(P1, np.eye(bases[1].num_basis)), np.kron(np.eye(bases[0].num_basis), P2)]
    pens = tuple(_penalized.scale_penalty(Xc, ct.penalty(P)) for P in raw_pens)
    return TermBasis(term, tuple(bases), ct, pens)


def build_design(spec: ModelSpec, ds: FunctionalDataset, frame: ModelFrame | None = None):
    """Design blocks for every term plus the response vector.

    Rows are the usable observations (output and all model covariates
    present); smooth terms are centered over those rows.
    """
    frame = frame if frame is not None else model_frame(spec, ds)
    designs = []
    for term in spec.terms:
        tb = _setup_term(term, frame.columns)
        designs.append(TermDesign(tb, tb.design(frame.columns, clamp=False), tb.penalties))
    return designs, frame.y


@dataclass(frozen=True, eq=False)
class PenalizedFit:
    coefficients: tuple
    lambdas: tuple
    edf: tuple
    rss: float
    gcv: float

    @property
    def coef(self):
        return np.concatenate(self.coefficients)


def _layout(designs):
    blocks, pens, k = [], [], 0
    for d in designs:
        p = d.X.shape[1]
        blocks.append(slice(k, k + p))
        for P in d.penalties:
            pens.append(_penalized.Penalty(k, k + p, P))
        k += p
    return blocks, pens


def _unpack(sol, designs, blocks):
    coefs, lams, edf = [], [], []
    j = 0
    for d, sl in zip(designs, blocks):
        coefs.append(sol.coef[sl].copy())
        npen = len(d.penalties)
        lams.append(tuple(float(x) for x in sol.lambdas[j:j + npen]))
        j += npen
        edf.append(float(sol.edf[sl].sum()))
    return PenalizedFit(tuple(coefs), tuple(lams), tuple(edf), sol.rss, sol.gcv)


def _system_lambdas(designs):
    lam = [x for d in designs for x in d.lambdas]
    if not lam:
        return None
    if len(lam) != sum(len(d.penalties) for d in designs):
        raise ConfigError("smoothing parameters given for some but not all penalties")
    return lam


def fit_penalized(designs: Sequence[TermDesign], y, lambdas=None) -> PenalizedFit:
    """Penalized least squares over all term blocks.

    Minimizes ``|y - X b|^2 + sum lam_k b' S_k b``. Smoothing parameters
    come from ``lambdas`` (flat, one per penalty), from the designs' own
    ``lambdas``, or are selected by GCV.
    """
    X = np.hstack([d.X for d in designs])
    y = np.asarray(y, dtype=float)
    if X.shape[1] >= X.shape[0]:
        raise NumericError(f"{X.shape[1]} coefficients for {X.shape[0]} observations")
    blocks, pens = _layout(designs)
    if lambdas is None:
        lambdas = _system_lambdas(designs)
    sol = _penalized.select_and_solve(_penalized.GramSystem.from_design(X, y), pens, lambdas)
    return _unpack(sol, designs, blocks)


@dataclass(frozen=True, eq=False)
class Stage1Result:
    spec: ModelSpec
    frame: ModelFrame
    designs: tuple
    fit: PenalizedFit
    residuals: ResidualSet

    @property
    def term_bases(self):
        return tuple(d.basis for d in self.designs)

    def residual_variance(self):
        r = np.concatenate(self.residuals.values)
        return float(np.mean(r**2))


def _residual_set(frame, resid):
    times, values = [], []
    for sl in frame.day_slices():
        times.append(frame.columns[TIME][sl].copy())
        values.append(resid[sl].copy())
    return ResidualSet(frame.day_ids, tuple(times), tuple(values))


def fit_stage1(spec: ModelSpec, ds: FunctionalDataset) -> Stage1Result:
    """Working-independence fit of the fixed effects; residual curves per day."""
    frame = model_frame(spec, ds)
    designs, y = build_design(spec, ds, frame)
    fit = fit_penalized(designs, y)
    X = np.hstack([d.X for d in designs])
    resid = y - X @ fit.coef
    designs = tuple(replace(d, lambdas=lam) for d, lam in zip(designs, fit.lambdas))
    return Stage1Result(spec, frame, designs, fit, _residual_set(frame, resid))


# ----------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Fixed effects, eigensystem(s) and predicted scores of a trained model."""

    spec: ModelSpec
    term_bases: tuple
    coefficients: tuple
    lambdas: tuple
    edf: tuple
    eigensystems: tuple
    scores: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    fingerprint: dict = field(default_factory=dict)

    @property
    def eigensystem(self) -> EigenSystem:
        """Eigensystem used for monitoring: the last (most recent) segment."""
        return self.eigensystems[-1]

    def eigensystem_for(self, day_id) -> EigenSystem:
        return self.eigensystems[min(self.spec.segment_of(day_id), len(self.eigensystems) - 1)]

    @property
    def m(self):
        return self.eigensystem.m

    @property
    def eigenvalues(self):
        return self.eigensystem.eigenvalues

    @property
    def sigma2(self):
        return self.eigensystem.sigma2

    @property
    def alpha0(self):
        for tb, c in zip(self.term_bases, self.coefficients):
            if tb.term.kind == "constant_intercept":
                return float(c[0])
        raise KeyError("constant_intercept")

    def term(self, label):
        for tb, c in zip(self.term_bases, self.coefficients):
            if tb.term.label == label or str(tb.term) == label:
                return tb, c
        raise KeyError(label)

    def eval_term(self, label, cols, clamp=True):
        tb, c = self.term(label)
        return tb.design(cols, clamp) @ c

    def predict_columns(self, cols, clamp=True) -> np.ndarray:
        n = len(cols[TIME])
        out = np.zeros(n)
        for tb, c in zip(self.term_bases, self.coefficients):
            out += tb.design(cols, clamp) @ c
        return out

    def smooth_function(self, label):
        """Fast callable ``x -> term value`` for a one-dimensional smooth."""
        tb, c = self.term(label)
        if len(tb.bases) != 1:
            raise ValueError(f"{label} is not a one-dimensional smooth")
        basis = tb.bases[0]
        spl = basis.spline(tb.full_coef(c))

        def f(x):
            return spl(basis.clip(x))
        return f


def _day_blocks(frame, designs, spec, eigensystems):
    X = np.hstack([d.X for d in designs])
    out = []
    for k, sl in enumerate(frame.day_slices()):
        eig = eigensystems[min(spec.segment_of(frame.day_ids[k]), len(eigensystems) - 1)]
        out.append((sl, eig))
    return X, out


def _check_eig(eig):
    if eig.m and (eig.sigma2 is None or not eig.sigma2 > 0):
        raise NumericError("eigensystem needs a positive noise variance for stage 2")
    if np.any(eig.eigenvalues <= 0):
        raise NumericError("eigenvalues must be positive")


def fit_stage2(spec: ModelSpec, ds: FunctionalDataset, eig, stage1: Stage1Result | None = None) -> FittedModel:
    """Refit fixed effects jointly with ridge-penalized day scores.

    ``eig`` is one :class:`EigenSystem` or a sequence with one per segment.
    The day scores are profiled out: with ``Z_j`` the eigenfunctions at the
    day's times and ``M_j = Z_j'Z_j + sigma2 diag(1/nu)``, the fixed effects
    solve a penalized GLS with weight ``I - Z_j M_j^-1 Z_j'`` per day, and
    ``xi_j = M_j^-1 Z_j' (y_j - X_j beta)``.
    """
    eigensystems = tuple(eig) if isinstance(eig, (list, tuple)) else (eig,)
    for e in eigensystems:
        _check_eig(e)
    if stage1 is None:
        stage1 = fit_stage1(spec, ds)
    frame, designs = stage1.frame, stage1.designs
    X, days = _day_blocks(frame, designs, spec, eigensystems)
    y = frame.y
    p = X.shape[1]
    G = X.T @ X
    c = X.T @ y
    yy = float(y @ y)
    factors = []
    for sl, e in days:
        if e.m == 0:
            factors.append(None)
            continue
        Z = e.evaluate(frame.columns[TIME][sl])
        M = Z.T @ Z + np.diag(e.sigma2 / e.eigenvalues)
        try:
            cf = linalg.cho_factor(M, lower=True)
        except linalg.LinAlgError:
            raise NumericError("score block not positive definite") from None
        ZX = Z.T @ X[sl]
        Zy = Z.T @ y[sl]
        G -= ZX.T @ linalg.cho_solve(cf, ZX)
        c -= ZX.T @ linalg.cho_solve(cf, Zy)
        yy -= float(Zy @ linalg.cho_solve(cf, Zy))
        factors.append((Z, cf))
    if p >= frame.n:
        raise NumericError(f"{p} coefficients for {frame.n} observations")
    blocks, pens = _layout(designs)
    sol = _penalized.select_and_solve(_penalized.GramSystem(G, c, yy, frame.n), pens)
    fit = _unpack(sol, designs, blocks)

    beta = sol.coef
    resid = y - X @ beta
    scores = {}
    for (sl, e), fac in zip(days, factors):
        day_id = frame.day_ids[frame.day_index[sl.start]]
        if fac is None:
            scores[day_id] = np.zeros(0)
            continue
        Z, cf = fac
        scores[day_id] = linalg.cho_solve(cf, Z.T @ resid[sl])

    sst = float(np.sum((y - y.mean()) ** 2))
    sse = float(np.sum(resid**2))
    diagnostics = {
        "r2": 1.0 - sse / sst if sst > 0 else float("nan"),
        "n_obs": int(frame.n),
        "n_days": len(frame.day_ids),
        "stage1_rss": stage1.fit.rss,
        "gcv": sol.gcv,
    }
    return FittedModel(spec, stage1.term_bases, fit.coefficients, fit.lambdas, fit.edf, eigensystems,
                       scores, diagnostics, training_fingerprint(frame))


def training_fingerprint(frame: ModelFrame) -> dict:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(frame.y).tobytes())
    for name in sorted(frame.columns):
        h.update(name.encode())
        h.update(np.ascontiguousarray(frame.columns[name]).tobytes())
    ranges = {k: [float(np.min(v)), float(np.max(v))] for k, v in sorted(frame.columns.items())}
    return {"rows": int(frame.n), "days": len(frame.day_ids), "sha256": h.hexdigest(), "ranges": ranges}


@dataclass(frozen=True)
class FixedPrediction:
    day_id: object
    t: np.ndarray
    values: np.ndarray
    skipped: np.ndarray  # times lacking a needed covariate


def predict_fixed(model: FittedModel, day: DayProfile) -> FixedPrediction:
    """Fixed-effects prediction at every time point that has all model covariates."""
    mask = day.complete_mask(model.spec.covariates, output=False)
    cols = {k: v[mask] for k, v in day_columns(day, model.spec.covariates).items()}
    values = model.predict_columns(cols) if mask.any() else np.zeros(0)
    if (~mask).any():
        log.info("day %s: %d point(s) skipped for missing covariates", day.day_id, int((~mask).sum()))
    return FixedPrediction(day.day_id, day.t[mask], values, day.t[~mask])


def r_squared(model: FittedModel, ds: FunctionalDataset) -> float:
    """``1 - SSE/SST`` of the fixed effects alone over the usable observations."""
    frame = model_frame(model.spec, ds)
    y = frame.y
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst <= 0:
        raise DataError("R^2 undefined: response has zero variance")
    sse = float(np.sum((y - model.predict_columns(frame.columns)) ** 2))
    return 1.0 - sse / sst
