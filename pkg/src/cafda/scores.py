"""Phase-II principal component scores of new days.

A new day is first residualized against the fixed effects of the trained
model. Scores then come either from numerical integration of the residual
curve against each eigenfunction (dense days only) or from the conditional
mean under the Gaussian mixed model (BLUP), which copes with any number of
observed points, including partial days.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .dataset import DayProfile
from .errors import DensityError, EmptyDataError, NumericError
from .famm import FittedModel, day_columns
from .fpca import DAY_DOMAIN, EigenSystem

GAP_MAX = 3.0
MIN_COVERAGE = 0.8


@dataclass(frozen=True)
class ResidualDay:
    day_id: object
    t: np.ndarray
    e: np.ndarray

    @property
    def n(self):
        return self.t.size


@dataclass(frozen=True)
class ScoreVector:
    day_id: object
    values: np.ndarray
    method: str
    n_points: int
    variances: np.ndarray | None = None

    def __len__(self):
        return self.values.size


def residualize(model: FittedModel, day: DayProfile) -> ResidualDay:
    """Observed output minus the fixed-effects prediction at usable points."""
    mask = day.complete_mask(model.spec.covariates)
    if not mask.any():
        raise EmptyDataError(f"day {day.day_id}: no point with output and all model covariates")
    cols = {k: v[mask] for k, v in day_columns(day, model.spec.covariates).items()}
    e = day.u[mask] - model.predict_columns(cols)
    return ResidualDay(day.day_id, day.t[mask].copy(), e)


def check_density(t, gap_max=GAP_MAX, min_coverage=MIN_COVERAGE):
    t = np.sort(np.asarray(t, dtype=float))
    lo, hi = DAY_DOMAIN
    if t.size < 2:
        raise DensityError("integration needs at least two points")
    gaps = np.diff(np.r_[lo, t, hi])
    if gaps.max() > gap_max:
        raise DensityError(f"largest gap {gaps.max():.3g} h exceeds {gap_max} h")
    coverage = (t[-1] - t[0]) / (hi - lo)
    if coverage < min_coverage:
        raise DensityError(f"points cover {coverage:.0%} of the day, need {min_coverage:.0%}")


def _interp_linear(x, t, y):
    """Piecewise-linear interpolant of ``(t, y)`` at ``x``, extended linearly past the end points."""
    out = np.interp(x, t, y)
    for side, a, b in ((x < t[0], 0, 1), (x > t[-1], -1, -2)):
        slope = (y[a] - y[b]) / (t[a] - t[b])
        out[side] = y[a] + (x[side] - t[a]) * slope
    return out


def scores_by_integration(rd: ResidualDay, eig: EigenSystem, gap_max=GAP_MAX,
                          min_coverage=MIN_COVERAGE) -> ScoreVector:
    """Trapezoid approximation of the integral of residual times eigenfunction.

    The residual is interpolated linearly onto the eigenfunction grid and
    extended linearly from the outermost points to the ends of the day.
    """
    check_density(rd.t, gap_max, min_coverage)
    order = np.argsort(rd.t)
    e = _interp_linear(eig.grid, rd.t[order], rd.e[order])
    values = eig.eigenfunctions @ (eig.weights * e)
    return ScoreVector(rd.day_id, values, "integration", int(rd.n), eig.eigenvalues.copy())


def blup_matrix(t, eig: EigenSystem) -> np.ndarray:
    """Linear map ``E -> xi_hat`` of the BLUP for fixed time points, shape ``(m, len(t))``."""
    phi = eig.evaluate(t)
    nu = eig.eigenvalues
    cov = (phi * nu) @ phi.T + eig.sigma2 * np.eye(phi.shape[0])
    try:
        cf = linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError:
        raise NumericError("error covariance of the day is not positive definite") from None
    return (linalg.cho_solve(cf, phi) * nu).T


def scores_by_blup(rd: ResidualDay, eig: EigenSystem) -> ScoreVector:
    """``nu_r phi_r' Sigma^-1 E`` with ``Sigma = Phi diag(nu) Phi' + sigma2 I``."""
    if rd.n < 1:
        raise EmptyDataError("BLUP needs at least one point")
    if eig.sigma2 is None:
        raise NumericError("eigensystem lacks a noise variance")
    values = blup_matrix(rd.t, eig) @ rd.e
    return ScoreVector(rd.day_id, values, "blup", int(rd.n), eig.eigenvalues.copy())


def select_monitored(scores: ScoreVector, rho: int) -> ScoreVector:
    """Drop the first ``rho`` components (attributed to latent confounders)."""
    m = len(scores)
    if not 0 <= rho < m:
        raise ValueError(f"cannot drop {rho} of {m} components")
    var = None if scores.variances is None else scores.variances[rho:]
    return ScoreVector(scores.day_id, scores.values[rho:], scores.method, scores.n_points, var)


def day_scores(model: FittedModel, day: DayProfile, method="blup", rho=0) -> ScoreVector:
    """Residualize and score one day with the eigensystem of its segment."""
    rd = residualize(model, day)
    eig = model.eigensystem_for(day.day_id)
    sv = scores_by_integration(rd, eig) if method == "integration" else scores_by_blup(rd, eig)
    return select_monitored(sv, rho) if rho else sv
