"""Penalized least squares on Gram matrices with GCV smoothing selection.

The problem solved is::

    minimize  (y - X b)' W (y - X b) + sum_k lam_k * b' S_k b

given only ``G = X' W X``, ``c = X' W y``, ``yy = y' W y`` and the number
of observations. Working from Gram matrices lets the same code serve plain
fits, the whitened stage-2 fit and the covariance smoother.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .errors import NumericError

log = logging.getLogger(__name__)

LOG10_LAMBDA_RANGE = (-6.0, 8.0)


@dataclass(frozen=True)
class Penalty:
    """Penalty matrix ``S`` acting on coefficient columns ``start:stop``."""

    start: int
    stop: int
    S: np.ndarray


@dataclass
class GramSystem:
    G: np.ndarray
    c: np.ndarray
    yy: float
    n: int

    @classmethod
    def from_design(cls, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        return cls(X.T @ X, X.T @ y, float(y @ y), X.shape[0])


@dataclass(frozen=True)
class PenalizedSolution:
    coef: np.ndarray
    lambdas: np.ndarray
    edf: np.ndarray  # per coefficient (diagonal of the influence in coef space)
    rss: float
    gcv: float


def _penalty_matrix(p, penalties, lambdas):
    S = np.zeros((p, p))
    for lam, pen in zip(lambdas, penalties):
        S[pen.start:pen.stop, pen.start:pen.stop] += lam * pen.S
    return S


def solve(system: GramSystem, penalties, lambdas) -> PenalizedSolution:
    G, c = system.G, system.c
    p = G.shape[0]
    A = G + _penalty_matrix(p, penalties, lambdas)
    try:
        cf = linalg.cho_factor(A, lower=True, check_finite=True)
        coef = linalg.cho_solve(cf, c)
        H = linalg.cho_solve(cf, G)
    except (linalg.LinAlgError, ValueError):
        if not np.isfinite(A).all():
            raise NumericError("non-finite penalized normal equations") from None
        log.warning("penalized normal equations not positive definite; using pseudo-inverse")
        Ai = linalg.pinvh(A)
        coef = Ai @ c
        H = Ai @ G
    edf = np.diag(H).copy()
    rss = float(system.yy - 2.0 * coef @ c + coef @ G @ coef)
    rss = max(rss, 0.0)
    denom = system.n - edf.sum()
    gcv = system.n * rss / denom**2 if denom > 0 else math.inf
    return PenalizedSolution(coef, np.asarray(lambdas, dtype=float), edf, rss, gcv)


def _minimize_bounded(f, a, b, tol=0.02):
    """Bounded scalar minimum of ``f`` on ``[a, b]``, returned as ``(x, f(x))``."""
    res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": tol / 2})
    return float(res.x), float(res.fun)


def select_and_solve(system: GramSystem, penalties, lambdas=None, sweeps=2) -> PenalizedSolution:
    """Fit with GCV-selected smoothing parameters unless ``lambdas`` is given.

    Selection is coordinate-wise over ``log10(lambda)`` in [-6, 8]: each
    coordinate gets a unit-step grid scan followed by bounded Brent
    refinement around the best grid point, repeated for ``sweeps`` passes.
    """
    penalties = list(penalties)
    if lambdas is not None or not penalties:
        lam = np.ones(len(penalties)) if lambdas is None else np.asarray(lambdas, dtype=float)
        return solve(system, penalties, lam)

    lo, hi = LOG10_LAMBDA_RANGE
    loglam = np.zeros(len(penalties))
    cache = {}

    def score(vec):
        key = tuple(np.round(vec, 10))
        if key not in cache:
            cache[key] = solve(system, penalties, 10.0 ** vec).gcv
        return cache[key]

    grid = np.arange(lo, hi + 0.5, 1.0)
    for _ in range(sweeps):
        for k in range(len(penalties)):
            def f(v, k=k):
                trial = loglam.copy()
                trial[k] = v
                return score(trial)

            vals = [f(v) for v in grid]
            i = int(np.argmin(vals))
            a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
            best, fbest = _minimize_bounded(f, a, b)
            if vals[i] < fbest:
                best = grid[i]
            loglam[k] = best
    return solve(system, penalties, 10.0 ** loglam)


def scale_penalty(X, S):
    """Rescale ``S`` to the magnitude of ``X'X`` so lambda=1 is a neutral start."""
    xtx = np.linalg.norm(X.T @ X)
    s = np.linalg.norm(S)
    if s == 0 or xtx == 0:
        return S
    return S * (xtx / s)
