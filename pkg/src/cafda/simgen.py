"""Simulated daily profiles with known truth, and the simulation studies.

Data generating process (one covariate, hourly points ``t = 1, ..., 24``)::

    u_j(t) = alpha0 + alpha~(t) + f(z_j(t)) + sum_r xi_rj phi_r(t) + eps_j(t)

    alpha~(t) = sin(pi t / 48) + cos(pi t / 6), centered over (0, 24)
    f(z)      = exp(-11 z / 5) - 0.5
    z_j(t)    = zeta0_j + zeta1_j sin(pi t / 12 + 0.3),
                zeta0 ~ U(2, 12), zeta1 ~ U(0, 4)
    phi_r     = orthonormal Legendre polynomials of degree 0, 1, 2 on (0, 24)
    xi_rj     ~ N(0, nu_r), nu_r = exp(-(r + 1) / 2)
    eps       ~ N(0, sigma2), sigma2 = 0.2 (a variance)
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate

from .dataset import DayProfile, FunctionalDataset
from .famm import TIME, DAY_OF_YEAR, FittedModel, ModelSpec
from .fpca import trapezoid_weights
from .mewma import ChartConfig, calibrate_h4
from .pipeline import train
from .scores import blup_matrix

log = logging.getLogger(__name__)

HOURS = np.arange(1.0, 25.0)


@dataclass(frozen=True)
class DgpConfig:
    J: int = 300
    points: np.ndarray = field(default_factory=lambda: HOURS.copy())
    alpha0: float = 5.0
    eigenvalues: tuple = tuple(math.exp(-(r + 1) / 2) for r in (1, 2, 3))
    sigma2: float = 0.2
    zeta0: tuple = (2.0, 12.0)
    zeta1: tuple = (0.0, 4.0)
    seed: int = 0

    def __post_init__(self):
        if self.J < 1:
            raise ValueError("J must be positive")
        if self.sigma2 < 0 or any(v < 0 for v in self.eigenvalues):
            raise ValueError("variances must be nonnegative")
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))


@dataclass(frozen=True)
class ShiftSpec:
    """Mean shift ``delta`` in score component ``r`` (1-based) from day ``tau`` on."""

    r: int = 1
    delta: float = 0.0
    tau: int = 1

    def __post_init__(self):
        if self.r < 1 or self.delta < 0 or self.tau < 1:
            raise ValueError("shift needs r >= 1, delta >= 0, tau >= 1")


def legendre_eigenfunctions(grid) -> np.ndarray:
    """The three true eigenfunctions at ``grid``; shape ``(3, len(grid))``."""
    t = np.asarray(grid, dtype=float)
    x = t / 24.0
    return np.vstack([
        np.full_like(t, 1.0 / math.sqrt(24.0)),
        math.sqrt(3.0 / 24.0) * (t / 12.0 - 1.0),
        math.sqrt(5.0 / 24.0) * (6.0 * x**2 - 6.0 * x + 1.0),
    ])


def _alpha_raw(t):
    return np.sin(np.pi * t / 48.0) + np.cos(np.pi * t / 6.0)


@lru_cache(maxsize=1)
def _alpha_mean():
    val, _ = integrate.quad(lambda s: float(_alpha_raw(s)), 0.0, 24.0, limit=200, epsabs=1e-13)
    return val / 24.0


def alpha_tilde(t):
    return _alpha_raw(np.asarray(t, dtype=float)) - _alpha_mean()


def f_true(z):
    return np.exp(-11.0 * np.asarray(z, dtype=float) / 5.0) - 0.5


def covariate(zeta0, zeta1, t):
    return np.asarray(zeta0)[..., None] + np.asarray(zeta1)[..., None] * np.sin(np.pi * np.asarray(t) / 12.0 + 0.3)


def fixed_part(cfg: DgpConfig, t, z):
    return cfg.alpha0 + alpha_tilde(t) + f_true(z)


@dataclass(frozen=True)
class SimTruth:
    scores: np.ndarray  # (J, 3)
    zeta: np.ndarray  # (J, 2)
    noise: np.ndarray  # (J, len(points))


def _draw_days(cfg, n, rng, mean_shift=None):
    t = cfg.points
    zeta0 = rng.uniform(*cfg.zeta0, size=n)
    zeta1 = rng.uniform(*cfg.zeta1, size=n)
    z = covariate(zeta0, zeta1, t)
    nu = np.asarray(cfg.eigenvalues, dtype=float)
    xi = rng.standard_normal((n, nu.size)) * np.sqrt(nu)
    if mean_shift is not None:
        xi += mean_shift
    phi = legendre_eigenfunctions(t)[: nu.size]
    eps = rng.standard_normal((n, t.size)) * math.sqrt(cfg.sigma2)
    u = fixed_part(cfg, t, z) + xi @ phi + eps
    return z, u, xi, np.c_[zeta0, zeta1], eps


def generate_phase1(cfg: DgpConfig = DgpConfig(), return_truth=False):
    """Phase-I training days ``1..J`` with output ``u`` and covariate ``z``."""
    rng = np.random.default_rng(cfg.seed)
    z, u, xi, zeta, eps = _draw_days(cfg, cfg.J, rng)
    profiles = tuple(DayProfile(j + 1, cfg.points, u[j], {"z": z[j]}) for j in range(cfg.J))
    ds = FunctionalDataset(profiles, ("z",))
    if return_truth:
        return ds, SimTruth(xi, zeta, eps)
    return ds


def _shift_vector(cfg, shift):
    vec = np.zeros(len(cfg.eigenvalues))
    if shift is not None and shift.delta:
        if shift.r > vec.size:
            raise ValueError(f"shift component {shift.r} beyond {vec.size} components")
        vec[shift.r - 1] = shift.delta
    return vec


def generate_phase2_day(cfg: DgpConfig, shift: ShiftSpec | None = None, rng=None, g=1, day_id=None,
                        return_truth=False):
    """One Phase-II day ``g``; the shift applies when ``g >= shift.tau``."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    vec = _shift_vector(cfg, shift) if shift is not None and g >= shift.tau else None
    z, u, xi, zeta, eps = _draw_days(cfg, 1, rng, vec)
    day = DayProfile(g if day_id is None else day_id, cfg.points, u[0], {"z": z[0]})
    if return_truth:
        return day, SimTruth(xi, zeta, eps)
    return day


def generate_phase2(cfg: DgpConfig, n_days, shift: ShiftSpec | None = None, seed=None, first_day=1):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    profiles = [generate_phase2_day(cfg, shift, rng, g=g, day_id=first_day + g - 1) for g in range(1, n_days + 1)]
    return FunctionalDataset(tuple(profiles), ("z",))


def delete_cells(ds: FunctionalDataset, fraction, seed=0, mode="points") -> FunctionalDataset:
    """Delete a random ``fraction`` of the data.

    ``mode="points"`` blanks whole (day, time) cells, output and covariates
    together, so ``fraction`` is the share of lost observations.
    ``mode="values"`` blanks every output and covariate value independently,
    which loses more usable points than ``fraction`` since a point needs
    all of its values.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    if mode not in ("points", "values"):
        raise ValueError(f"unknown deletion mode {mode!r}")
    rng = np.random.default_rng(seed)
    profiles = []
    for p in ds.profiles:
        u = p.u.copy()
        covs = {k: p.covariates[k].copy() for k in ds.covariate_names}
        if mode == "points":
            kill = rng.random(u.size) < fraction
            u[kill] = np.nan
            for v in covs.values():
                v[kill] = np.nan
        else:
            u[rng.random(u.size) < fraction] = np.nan
            for v in covs.values():
                v[rng.random(v.size) < fraction] = np.nan
        profiles.append(DayProfile(p.day_id, p.t, u, covs, p.d))
    return FunctionalDataset(tuple(profiles), ds.covariate_names)


# ----------------------------------------------------------------------------
# model recovery

BASIC_SPEC = ("constant_intercept", "functional_intercept(t)", "smooth(z, k=20)")


@dataclass(frozen=True)
class RecoveryReport:
    """Per-replication estimates on common grids, and their averages.

    ``t_grid``/``z_grid`` are the evaluation grids; ``alpha`` and
    ``level_f`` hold one row per replication for the centered functional
    intercept and ``alpha0 + f``; ``inner`` holds ``|<phi_hat_r, phi_r>|``.
    """

    t_grid: np.ndarray
    z_grid: np.ndarray
    alpha: np.ndarray
    level_f: np.ndarray
    nu: np.ndarray
    sigma2: np.ndarray
    inner: np.ndarray
    m: np.ndarray
    true_alpha: np.ndarray
    true_level_f: np.ndarray

    @property
    def alpha_error(self):
        return np.abs(self.alpha.mean(axis=0) - self.true_alpha)

    @property
    def level_f_error(self):
        return np.abs(self.level_f.mean(axis=0) - self.true_level_f)

    def summary(self, true_nu, true_sigma2):
        return {
            "reps": int(self.alpha.shape[0]),
            "max_abs_error_alpha": float(self.alpha_error.max()),
            "max_abs_error_alpha0_plus_f": float(self.level_f_error.max()),
            "mean_nu": self.nu.mean(axis=0).tolist(),
            "nu_relative_error": (np.abs(self.nu.mean(axis=0) - true_nu) / true_nu).tolist(),
            "mean_sigma2": float(self.sigma2.mean()),
            "sigma2_relative_error": float(abs(self.sigma2.mean() - true_sigma2) / true_sigma2),
            "min_inner": self.inner.min(axis=0).tolist(),
            "mean_inner": self.inner.mean(axis=0).tolist(),
            "m": self.m.tolist(),
        }

    def write_curves(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["function", "x", "true", "mean_estimate"])
            for x, tr, est in zip(self.t_grid, self.true_alpha, self.alpha.mean(axis=0)):
                w.writerow(["alpha_tilde", repr(float(x)), repr(float(tr)), repr(float(est))])
            for x, tr, est in zip(self.z_grid, self.true_level_f, self.level_f.mean(axis=0)):
                w.writerow(["alpha0_plus_f", repr(float(x)), repr(float(tr)), repr(float(est))])


def interior(lo, hi, keep=0.9):
    pad = (1.0 - keep) / 2.0 * (hi - lo)
    return lo + pad, hi - pad


def recovery_study(cfg: DgpConfig = DgpConfig(), reps=20, spec=BASIC_SPEC, missing=0.0, n_grid=101,
                   z_range=None, **train_kw) -> RecoveryReport:
    """Repeat (simulate J days, train) and collect estimates on common grids.

    ``z_grid`` spans ``z_range`` (default: the 5%-95% quantile range of the
    covariate under the DGP, where the covariate is actually observed).
    """
    spec = spec if isinstance(spec, ModelSpec) else ModelSpec(tuple(spec))
    alpha_label = next(tm.label for tm in spec.terms if tm.kind == "functional_intercept")
    f_label = next(tm.label for tm in spec.terms if tm.covariates == ("z",))
    t_grid = np.linspace(*interior(0.0, 24.0), n_grid)
    if z_range is None:
        z_range = covariate_quantiles(cfg)
    z_grid = np.linspace(*z_range, n_grid)
    true_phi = legendre_eigenfunctions(_fine_grid())
    seeds = np.random.SeedSequence(cfg.seed).spawn(reps)
    alpha, level_f, nus, s2, inner, ms = [], [], [], [], [], []
    for k in range(reps):
        rcfg = replace(cfg, seed=int(seeds[k].generate_state(1)[0]))
        ds = generate_phase1(rcfg)
        if missing:
            ds = delete_cells(ds, missing, seed=rcfg.seed + 1)
        model = train(spec, ds, **train_kw)
        cols_t = {TIME: t_grid, DAY_OF_YEAR: np.zeros_like(t_grid)}
        alpha.append(model.eval_term(alpha_label, cols_t))
        cols_z = {TIME: np.full_like(z_grid, 12.0), DAY_OF_YEAR: np.zeros_like(z_grid), "z": z_grid}
        level_f.append(model.alpha0 + model.eval_term(f_label, cols_z))
        eig = model.eigensystem
        k_true = min(3, eig.m)
        nu = np.full(3, np.nan)
        nu[:k_true] = eig.eigenvalues[:k_true]
        nus.append(nu)
        s2.append(eig.sigma2)
        phi_hat = np.zeros((3, _fine_grid().size))
        phi_hat[:k_true] = eig.evaluate(_fine_grid()).T[:k_true]
        w = _fine_weights()
        inner.append(np.abs((phi_hat * w) @ true_phi.T).diagonal())
        ms.append(eig.m)
        log.info("recovery rep %d/%d: m=%d nu=%s sigma2=%.3f", k + 1, reps, eig.m, np.round(nu, 3), eig.sigma2)
    return RecoveryReport(
        t_grid, z_grid, np.array(alpha), np.array(level_f), np.array(nus), np.array(s2), np.array(inner),
        np.array(ms), alpha_tilde(t_grid), cfg.alpha0 + f_true(z_grid),
    )


FINE_GRID = np.linspace(0.0, 24.0, 2401)


def _fine_grid():
    return FINE_GRID


def _fine_weights():
    return trapezoid_weights(FINE_GRID)


def covariate_quantiles(cfg: DgpConfig, q=(0.05, 0.95), n=200_000, seed=12345):
    rng = np.random.default_rng(seed)
    z = covariate(rng.uniform(*cfg.zeta0, n), rng.uniform(*cfg.zeta1, n), cfg.points)
    return tuple(float(x) for x in np.quantile(z, q))


# ----------------------------------------------------------------------------
# out-of-control ARL


@dataclass(frozen=True)
class ArlRow:
    lam: float
    component: int
    delta: float
    delta_std: float
    arl: float
    se: float
    reps: int
    h4: float
    censored: int = 0


@dataclass(frozen=True)
class ArlTable:
    rows: tuple

    def get(self, lam, component, delta=None, delta_std=None):
        for r in self.rows:
            if r.lam != lam or r.component != component:
                continue
            if delta is not None and math.isclose(r.delta, delta, abs_tol=1e-12):
                return r
            if delta_std is not None and math.isclose(r.delta_std, delta_std, abs_tol=1e-9):
                return r
        raise KeyError((lam, component, delta, delta_std))

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "component", "delta", "delta_std", "arl", "se", "reps"])
            for r in self.rows:
                w.writerow([r.lam, r.component, repr(r.delta), repr(r.delta_std), repr(r.arl), repr(r.se), r.reps])


class _BatchScorer:
    """Vectorized residualize + BLUP for simulated days on the fixed hourly grid."""

    def __init__(self, model: FittedModel, cfg: DgpConfig):
        self.t = cfg.points
        cols = {TIME: self.t, DAY_OF_YEAR: np.zeros_like(self.t)}
        static = np.zeros_like(self.t)
        self.z_terms = []
        for tb, c in zip(model.term_bases, model.coefficients):
            if tb.term.covariates == ("z",) and len(tb.bases) == 1 and tb.term.kind == "smooth":
                self.z_terms.append(model.smooth_function(tb.term.label))
            elif tb.term.covariates:
                raise ValueError(f"batch scoring does not support term {tb.term.label}")
            else:
                static = static + tb.design(cols) @ c
        self.static = static
        eig = model.eigensystem
        self.B = blup_matrix(self.t, eig)

    def __call__(self, z, u):
        pred = np.broadcast_to(self.static, u.shape).copy()
        for f in self.z_terms:
            pred += f(z.ravel()).reshape(z.shape)
        return (u - pred) @ self.B.T


def _chart_runs(scorer, cfg, chart: ChartConfig, shift_vec, reps, seed, max_steps, chunk=5000):
    c = (2.0 - chart.lam) / chart.lam
    inv = 1.0 / chart.variances
    out = []
    censored = 0
    for n, ss in zip(*_split(reps, seed, chunk)):
        rng = np.random.default_rng(ss)
        omega = np.zeros((n, chart.dim))
        ids = np.arange(n)
        rl = np.full(n, max_steps, dtype=np.int64)
        g = 0
        while ids.size and g < max_steps:
            g += 1
            z, u, *_ = _draw_days(cfg, ids.size, rng, shift_vec)
            xi = scorer(z, u)
            omega = (1.0 - chart.lam) * omega + chart.lam * xi
            t2 = c * np.einsum("ij,ij,j->i", omega, omega, inv)
            hit = t2 > chart.h4
            if hit.any():
                rl[ids[hit]] = g
                ids = ids[~hit]
                omega = omega[~hit]
        censored += ids.size
        out.append(rl)
    n = np.concatenate(out).astype(float)
    se = float(n.std(ddof=1) / math.sqrt(n.size)) if n.size > 1 else math.nan
    return float(n.mean()), se, censored


def _split(reps, seed, chunk):
    sizes = [min(chunk, reps - a) for a in range(0, reps, chunk)]
    return sizes, np.random.SeedSequence(seed).spawn(len(sizes))


def arl_experiment(model: FittedModel, cfg: DgpConfig = DgpConfig(), *, lambdas=(0.1, 0.3, 1.0),
                   components=(1, 2, 3), deltas=(0.0, 0.5, 1.0, 2.0, 4.0), std_deltas=(), target_arl=100.0,
                   reps=10_000, calibration_reps=200_000, seed=0, max_steps=100_000,
                   h4=None, threads=None) -> ArlTable:
    """Out-of-control ARL of charts fed with BLUP scores from ``model``.

    For each ``lam`` the threshold is calibrated on exact Gaussian scores
    with ``Lambda = diag(nu_hat)`` (or taken from ``h4``, a mapping lam ->
    threshold). Each cell then simulates fresh days from the DGP with a
    mean shift in one true score component, scores them with the trained
    model and runs the chart until its first alarm. ``std_deltas`` adds
    cells with ``delta = s * sqrt(nu_r)``. The ``delta = 0`` cell is shared
    by all components of a ``lam``.
    """
    scorer = _BatchScorer(model, cfg)
    nu_hat = model.eigensystem.eigenvalues
    nu_true = np.asarray(cfg.eigenvalues, dtype=float)
    rows = []
    for li, lam in enumerate(lambdas):
        if h4 is not None and lam in h4:
            thr = float(h4[lam])
        else:
            thr = calibrate_h4(nu_hat.size, lam, target_arl, reps=calibration_reps, seed=seed + li,
                               threads=threads).h4
        chart = ChartConfig(lam, nu_hat, thr, target_arl)
        cells = []
        for r in components:
            cells += [(r, float(d)) for d in deltas]
            cells += [(r, float(s) * math.sqrt(nu_true[r - 1])) for s in std_deltas]
        ic = None
        for r, delta in cells:
            cell_seed = [seed, li, r, int(round(delta * 1e6))]
            if delta == 0.0 and ic is not None:
                arl, se, cens = ic
            else:
                shift = _shift_vector(cfg, ShiftSpec(r, delta))
                arl, se, cens = _chart_runs(scorer, cfg, chart, shift, reps, cell_seed if delta else [seed, li, 0, 0],
                                            max_steps)
                if delta == 0.0:
                    ic = (arl, se, cens)
            rows.append(ArlRow(lam, r, delta, delta / math.sqrt(nu_true[r - 1]), arl, se, reps, thr, cens))
            log.info("ARL lam=%g r=%d delta=%.3g: %.2f +- %.2f", lam, r, delta, arl, se)
    return ArlTable(tuple(rows))
