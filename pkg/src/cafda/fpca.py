"""Functional principal components of the error process.

Residual curves from the working-independence fit are turned into pooled
within-day cross-products. Off-diagonal products are smoothed with a tensor
P-spline to get the covariance surface; the diagonal (which also carries the
white-noise variance) is smoothed separately and only used for the noise
variance. The surface is then decomposed on a fine grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import _penalized
from .errors import DataError, NumericError
from .splinebasis import BSplineBasis, TensorBasis, difference_penalty, row_kron

log = logging.getLogger(__name__)

DAY_DOMAIN = (0.0, 24.0)
GRID_SIZE = 101
SURFACE_BASIS = 8
DIAGONAL_BASIS = 10
SIGMA2_FLOOR = 1e-8
CV_FOLDS = 10


def day_grid(size=GRID_SIZE):
    """Equally spaced grid over the whole day, both ends included."""
    return np.linspace(*DAY_DOMAIN, size)


def trapezoid_weights(grid):
    grid = np.asarray(grid, dtype=float)
    w = np.zeros_like(grid)
    dx = np.diff(grid)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


@dataclass(frozen=True)
class ResidualSet:
    """Per-day residual curves ``(t, r)`` from a working-independence fit."""

    day_ids: tuple
    times: tuple
    values: tuple

    def __len__(self):
        return len(self.day_ids)

    def subset(self, keep):
        keep = list(keep)
        return ResidualSet(tuple(self.day_ids[i] for i in keep),
                           tuple(self.times[i] for i in keep),
                           tuple(self.values[i] for i in keep))


@dataclass(frozen=True)
class CrossProducts:
    """Pooled within-day products; ``day`` numbers the day each off-diagonal product came from."""

    s: np.ndarray
    t: np.ndarray
    value: np.ndarray
    diag_t: np.ndarray
    diag_value: np.ndarray
    day: np.ndarray | None = None


def pool_crossproducts(res: ResidualSet) -> CrossProducts:
    """All within-day products ``r(s) r(t)``; ``s == t`` goes to the diagonal set."""
    s_parts, t_parts, v_parts, d_parts, dt, dv = [], [], [], [], [], []
    for k, (t, r) in enumerate(zip(res.times, res.values)):
        t = np.asarray(t, dtype=float)
        r = np.asarray(r, dtype=float)
        dt.append(t)
        dv.append(r * r)
        n = t.size
        if n < 2:
            continue
        i, j = np.nonzero(~np.eye(n, dtype=bool))
        s_parts.append(t[i])
        t_parts.append(t[j])
        v_parts.append(r[i] * r[j])
        d_parts.append(np.full(i.size, k))
    if not s_parts:
        raise DataError("cross-products need at least one day with two or more points")
    return CrossProducts(np.concatenate(s_parts), np.concatenate(t_parts), np.concatenate(v_parts),
                         np.concatenate(dt), np.concatenate(dv), np.concatenate(d_parts))


@dataclass(frozen=True)
class CovarianceSurface:
    grid: np.ndarray
    values: np.ndarray
    diagonal_raw: np.ndarray
    lambdas: tuple = ()

    @property
    def spacing(self):
        return float(self.grid[1] - self.grid[0])


def _tensor_gram(tb, s, t, v, fold=None, folds=1, chunk=50_000):
    """Gram blocks ``X'X``, ``X'v``, ``v'v`` and counts, one per fold."""
    p = tb.num_basis
    G = np.zeros((folds, p, p))
    c = np.zeros((folds, p))
    yy = np.zeros(folds)
    n = np.zeros(folds, dtype=np.int64)
    fold = np.zeros(s.size, dtype=np.int64) if fold is None else fold
    for a in range(0, s.size, chunk):
        X = tb.design(s[a:a + chunk], t[a:a + chunk])
        vv = v[a:a + chunk]
        ff = fold[a:a + chunk]
        for k in np.unique(ff):
            sel = ff == k
            Xk = X[sel]
            G[k] += Xk.T @ Xk
            c[k] += Xk.T @ vv[sel]
            yy[k] += vv[sel] @ vv[sel]
            n[k] += int(sel.sum())
    return G, c, yy, n


def _cv_error(G, c, yy, S):
    """Sum over folds of the squared prediction error of the fit without that fold."""
    Gt, ct = G.sum(axis=0), c.sum(axis=0)
    err = 0.0
    for k in range(G.shape[0]):
        A = Gt - G[k] + S
        try:
            beta = linalg.solve(A, ct - c[k], assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            return np.inf
        err += yy[k] - 2.0 * beta @ c[k] + beta @ G[k] @ beta
    return float(err)


def _select_cv(G, c, yy, S, lo=-4.0, hi=6.0, step=0.25):
    """log10 lambda minimizing the leave-days-out error: grid scan, then golden refinement."""
    grid = np.arange(lo, hi + step / 2, step)
    errs = np.array([_cv_error(G, c, yy, 10.0**a * S) for a in grid])
    if not np.isfinite(errs).any():
        raise NumericError("covariance smoother singular for every smoothing parameter")
    i = int(np.argmin(errs))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    best, fbest = _penalized._minimize_bounded(lambda x: _cv_error(G, c, yy, 10.0**x * S), a, b, tol=0.01)
    return best if fbest < errs[i] else grid[i]


def smooth_covariance(points: CrossProducts, grid_size=GRID_SIZE, num_basis=SURFACE_BASIS,
                      order=2, diagonal_basis=DIAGONAL_BASIS, selection="gcv", folds=CV_FOLDS) -> CovarianceSurface:
    """Tensor P-spline smooth of the off-diagonal cross-products on a ``grid_size`` grid.

    With ``selection="gcv"`` each direction's difference penalty gets its
    own smoothing parameter, chosen by GCV over all products. With
    ``selection="cv"`` the two penalties share one parameter, chosen to
    predict the products of held-out days (``folds`` groups of days,
    assigned round-robin); this smooths more, since products from one day
    are dependent. The result is symmetrized as ``(S + S') / 2``. The
    diagonal products get their own one-dimensional P-spline, stored as
    ``diagonal_raw``.
    """
    if grid_size < 20:
        raise ValueError("grid_size must be at least 20")
    if selection not in ("cv", "gcv"):
        raise ValueError(f"unknown smoothing selection {selection!r}")
    if points.s.size == 0:
        raise DataError("no off-diagonal cross-products to smooth")
    b = BSplineBasis(*DAY_DOMAIN, num_basis)
    tb = TensorBasis(b, b)
    n_days = 1 if points.day is None else int(points.day.max()) + 1
    use_cv = selection == "cv" and points.day is not None and n_days >= folds
    if selection == "cv" and not use_cv:
        log.info("fewer than %d days with cross-products; selecting the covariance smoothing by GCV", folds)
    fold = points.day % folds if use_cv else None
    G, c, yy, n = _tensor_gram(tb, points.s, points.t, points.value, fold, folds if use_cv else 1)
    Gt = G.sum(axis=0)
    scale = np.linalg.norm(Gt)
    P1, P2 = tb.penalties(order)
    if use_cv:
        S = (P1 + P2) * (scale / np.linalg.norm(P1 + P2))
        loglam = _select_cv(G, c, yy, S)
        system = _penalized.GramSystem(Gt, c.sum(axis=0), float(yy.sum()), int(n.sum()))
        sol = _penalized.solve(system, [_penalized.Penalty(0, tb.num_basis, S)], [10.0**loglam])
        lambdas = (float(10.0**loglam),)
    else:
        system = _penalized.GramSystem(Gt, c.sum(axis=0), float(yy.sum()), int(n.sum()))
        pens = [_penalized.Penalty(0, tb.num_basis, P * (scale / np.linalg.norm(P))) for P in (P1, P2)]
        sol = _penalized.select_and_solve(system, pens)
        lambdas = tuple(float(x) for x in sol.lambdas)
    if not np.isfinite(sol.coef).all():
        raise NumericError("covariance smoother produced non-finite coefficients")
    grid = day_grid(grid_size)
    B = b.design(grid)
    coef = sol.coef.reshape(num_basis, num_basis)
    S_grid = B @ coef @ B.T
    S_grid = (S_grid + S_grid.T) / 2

    bd = BSplineBasis(*DAY_DOMAIN, diagonal_basis)
    Xd = bd.design(points.diag_t)
    dsys = _penalized.GramSystem.from_design(Xd, points.diag_value)
    Pd = difference_penalty(diagonal_basis, order)
    dsol = _penalized.select_and_solve(dsys, [_penalized.Penalty(0, diagonal_basis, _penalized.scale_penalty(Xd, Pd))])
    diag_raw = bd.design(grid) @ dsol.coef
    return CovarianceSurface(grid, S_grid, diag_raw, lambdas)


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Eigenfunctions on a grid with their eigenvalues and the noise variance.

    ``eigenfunctions`` has shape ``(m, len(grid))``. ``total_variance`` is
    the sum of all positive eigenvalues before truncation, so ``pve`` is
    ``eigenvalues.sum() / total_variance``.
    """

    grid: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    sigma2: float | None = None
    total_variance: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.eigenfunctions, dtype=float))
        if phi.size == 0:
            phi = np.zeros((0, np.asarray(self.grid).size))
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        object.__setattr__(self, "eigenfunctions", phi)
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=float).reshape(-1))
        if self.total_variance is None:
            object.__setattr__(self, "total_variance", float(self.eigenvalues.sum()))

    @property
    def m(self):
        return self.eigenvalues.size

    @property
    def pve(self):
        if not self.total_variance:
            return 0.0
        return float(self.eigenvalues.sum() / self.total_variance)

    @property
    def spacing(self):
        return float(self.grid[1] - self.grid[0])

    @property
    def weights(self):
        return trapezoid_weights(self.grid)

    def evaluate(self, t) -> np.ndarray:
        """Eigenfunctions at ``t`` by linear interpolation; shape ``(len(t), m)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.size, self.m))
        for r in range(self.m):
            out[:, r] = np.interp(t, self.grid, self.eigenfunctions[r])
        return out

    def gram(self):
        return (self.eigenfunctions * self.weights) @ self.eigenfunctions.T

    def covariance(self):
        return (self.eigenfunctions.T * self.eigenvalues) @ self.eigenfunctions

    def with_sigma2(self, sigma2):
        return EigenSystem(self.grid, self.eigenfunctions, self.eigenvalues, float(sigma2),
                           self.total_variance, dict(self.meta))

    def drop_leading(self, rho):
        if not 0 <= rho < max(self.m, 1):
            raise ValueError(f"cannot drop {rho} of {self.m} components")
        return EigenSystem(self.grid, self.eigenfunctions[rho:], self.eigenvalues[rho:], self.sigma2,
                           self.total_variance, dict(self.meta))

    def to_dict(self):
        return {
            "grid": self.grid.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "sigma2": self.sigma2,
            "total_variance": self.total_variance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["grid"], dtype=float), np.array(d["eigenfunctions"], dtype=float),
                   np.array(d["eigenvalues"], dtype=float), d.get("sigma2"), d.get("total_variance"))


def _orient(phi, weights):
    integral = weights @ phi
    if abs(integral) >= 1e-6:
        return phi if integral > 0 else -phi
    return phi if phi[0] > 0 else -phi


def eigendecompose(surface: CovarianceSurface) -> EigenSystem:
    """Eigenpairs of the covariance operator discretized with trapezoid weights.

    Solves ``W^1/2 S W^1/2 v = nu v`` and returns ``phi = W^-1/2 v``, which
    makes the eigenfunctions orthonormal under the trapezoid rule. Only
    positive eigenvalues are kept.
    """
    S = np.asarray(surface.values, dtype=float)
    if not np.allclose(S, S.T, atol=1e-10 * max(np.abs(S).max(), 1.0)):
        raise NumericError("covariance surface is not symmetric")
    w = trapezoid_weights(surface.grid)
    sw = np.sqrt(w)
    if np.any(sw <= 0):
        raise NumericError("degenerate grid")
    vals, vecs = np.linalg.eigh(sw[:, None] * S * sw[None, :])
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    keep = vals > 0
    if not keep.any():
        raise NumericError("covariance surface has no positive eigenvalue")
    vals, vecs = vals[keep], vecs[:, keep]
    phi = (vecs / sw[:, None]).T
    phi = np.array([_orient(p, w) for p in phi])
    return EigenSystem(np.asarray(surface.grid, dtype=float), phi, vals, None, float(vals.sum()))


def estimate_noise_variance(surface: CovarianceSurface) -> float:
    """Mean excess of the raw diagonal over the smooth surface's diagonal, floored."""
    diag_raw = np.asarray(surface.diagonal_raw, dtype=float)
    excess = float(np.mean(diag_raw - np.diag(surface.values)))
    floor = SIGMA2_FLOOR * abs(float(np.mean(diag_raw)))
    if floor <= 0:
        floor = SIGMA2_FLOOR
    return max(excess, floor)


def truncate(eig: EigenSystem, pve_threshold: float) -> EigenSystem:
    """Keep the smallest number of leading components reaching ``pve_threshold``."""
    if not 0 < pve_threshold < 1:
        raise ValueError("pve_threshold must lie in (0, 1)")
    frac = np.cumsum(eig.eigenvalues) / eig.total_variance
    m = int(np.searchsorted(frac, pve_threshold - 1e-12) + 1)
    m = min(m, eig.m)
    return EigenSystem(eig.grid, eig.eigenfunctions[:m], eig.eigenvalues[:m], eig.sigma2,
                       eig.total_variance, dict(eig.meta))


def fpca(res: ResidualSet, pve_threshold=0.99, grid_size=GRID_SIZE, num_basis=SURFACE_BASIS, order=2,
         selection="gcv") -> EigenSystem:
    """Cross-products, covariance smoothing, decomposition, noise variance and truncation."""
    points = pool_crossproducts(res)
    surface = smooth_covariance(points, grid_size=grid_size, num_basis=num_basis, order=order, selection=selection)
    full = eigendecompose(surface)
    sigma2 = estimate_noise_variance(surface)
    eig = truncate(full, pve_threshold).with_sigma2(sigma2)
    log.info("fpca: m=%d pve=%.4f sigma2=%.4g nu=%s", eig.m, eig.pve, sigma2, np.round(eig.eigenvalues, 4))
    return eig
