"""Cubic B-spline bases, difference penalties, tensor products and centering.

These are the building blocks of every smooth model term. A smooth function
is represented as ``f(x) = B(x) @ gamma`` where ``B`` is the design matrix
returned by :meth:`BSplineBasis.design` and ``gamma`` a coefficient vector.
Roughness is controlled with a quadratic penalty ``gamma @ P @ gamma`` built
from finite differences of neighbouring coefficients (P-splines).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigError, DomainError, NumericError

DEGREE = 3

# slack for points that sit on the boundary up to rounding
_DOMAIN_TOL = 1e-9


@dataclass(frozen=True)
class BSplineBasis:
    """Cubic B-spline basis with equally spaced knots on ``[lo, hi]``.

    Parameters
    ----------
    lo, hi : float
        Domain limits, ``lo < hi``.
    num_basis : int
        Number of basis functions ``L >= 4``.
    cyclic : bool, optional
        If True the basis is periodic with period ``hi - lo``: evaluation
        points are wrapped into the domain and the function at ``hi`` joins
        the function at ``lo`` with matching derivatives. Knots are then
        uniform with spacing ``(hi - lo) / L``.
    """

    lo: float
    hi: float
    num_basis: int
    cyclic: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"empty basis domain [{self.lo}, {self.hi}]")
        if self.num_basis < DEGREE + 1:
            raise ConfigError(f"need at least {DEGREE + 1} basis functions, got {self.num_basis}")

    @property
    def knots(self) -> np.ndarray:
        if self.cyclic:
            h = (self.hi - self.lo) / self.num_basis
            return self.lo + h * np.arange(-DEGREE, self.num_basis + DEGREE + 1)
        inner = np.linspace(self.lo, self.hi, self.num_basis - DEGREE + 1)
        return np.r_[[self.lo] * DEGREE, inner, [self.hi] * DEGREE]

    def clip(self, x):
        """Clamp points into the domain (identity for cyclic bases)."""
        x = np.asarray(x, dtype=float)
        if self.cyclic:
            return x
        return np.clip(x, self.lo, self.hi)

    def outside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.cyclic:
            return ~np.isfinite(x)
        return ~((x >= self.lo - _DOMAIN_TOL) & (x <= self.hi + _DOMAIN_TOL))

    def design(self, x) -> np.ndarray:
        """Evaluate all basis functions at ``x``; returns an ``(len(x), L)`` array."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        bad = self.outside(x)
        if bad.any():
            raise DomainError(
                f"{int(bad.sum())} point(s) outside basis domain [{self.lo}, {self.hi}], "
                f"e.g. {x[bad][0]!r}"
            )
        if x.size == 0:
            return np.zeros((0, self.num_basis))
        if self.cyclic:
            period = self.hi - self.lo
            xw = self.lo + np.mod(x - self.lo, period)
            xw = np.minimum(xw, self.hi)
            wide = BSpline.design_matrix(xw, self.knots, DEGREE).toarray()
            out = wide[:, : self.num_basis].copy()
            out[:, :DEGREE] += wide[:, self.num_basis:]
            return out
        xc = np.clip(x, self.lo, self.hi)
        return BSpline.design_matrix(xc, self.knots, DEGREE).toarray()

    def spline(self, coef) -> BSpline:
        """A scipy spline object for fast evaluation of ``design(x) @ coef``."""
        coef = np.asarray(coef, dtype=float)
        if self.cyclic:
            coef = np.r_[coef, coef[:DEGREE]]
            return BSpline(self.knots, coef, DEGREE, extrapolate="periodic")
        return BSpline(self.knots, coef, DEGREE, extrapolate=False)

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi, "num_basis": self.num_basis, "cyclic": self.cyclic}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["lo"]), float(d["hi"]), int(d["num_basis"]), bool(d.get("cyclic", False)))


def eval_basis(basis: BSplineBasis, x) -> np.ndarray:
    return basis.design(x)


def data_domain(x, expand=0.01):
    """``[min, max]`` of the finite values in ``x`` widened by ``expand`` of the range."""
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise DomainError("no finite values to derive a basis domain from")
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo
    if span <= 0:
        span = max(abs(lo), 1.0)
    return lo - expand * span, hi + expand * span


def difference_penalty(num_basis: int, order: int = 2) -> np.ndarray:
    """``D.T @ D`` for the ``order``-th finite difference operator ``D``."""
    if order < 1 or num_basis <= order:
        raise ConfigError(f"difference penalty needs num_basis > order >= 1 (got {num_basis}, {order})")
    D = np.diff(np.eye(num_basis), n=order, axis=0)
    return D.T @ D


def cyclic_difference_penalty(num_basis: int, order: int = 2) -> np.ndarray:
    """Difference penalty that wraps around, for periodic bases.

    Its null space is the constant vector only.
    """
    if order < 1 or num_basis <= order:
        raise ConfigError(f"difference penalty needs num_basis > order >= 1 (got {num_basis}, {order})")
    D = np.eye(num_basis)
    for _ in range(order):
        D = D - np.roll(D, 1, axis=1)
    return D.T @ D


def penalty_for(basis: BSplineBasis, order: int = 2) -> np.ndarray:
    if basis.cyclic:
        return cyclic_difference_penalty(basis.num_basis, order)
    return difference_penalty(basis.num_basis, order)


def row_kron(A, B) -> np.ndarray:
    """Row-wise Kronecker product: row ``i`` is ``np.kron(A[i], B[i])``."""
    A = np.asarray(A)
    B = np.asarray(B)
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


@dataclass(frozen=True)
class TensorBasis:
    """Tensor product of two marginal bases; coefficient index ``l1 * L2 + l2``."""

    basis1: BSplineBasis
    basis2: BSplineBasis

    @property
    def num_basis(self):
        return self.basis1.num_basis * self.basis2.num_basis

    def design(self, x1, x2) -> np.ndarray:
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        if x1.shape != x2.shape:
            raise ConfigError(f"tensor design needs equal-length inputs, got {x1.shape} and {x2.shape}")
        return row_kron(self.basis1.design(x1), self.basis2.design(x2))

    def penalties(self, order: int = 2):
        """Marginal penalties lifted to the tensor coefficient space (one per direction)."""
        P1 = penalty_for(self.basis1, order)
        P2 = penalty_for(self.basis2, order)
        I1 = np.eye(self.basis1.num_basis)
        I2 = np.eye(self.basis2.num_basis)
        return np.kron(P1, I2), np.kron(I1, P2)


def tensor_design(tb: TensorBasis, x1, x2) -> np.ndarray:
    return tb.design(x1, x2)


@dataclass(frozen=True)
class ConstraintTransform:
    """Null-space basis ``Z`` of a sum-to-zero constraint.

    Constrained coefficients ``beta`` map to full coefficients via
    ``gamma = Z @ beta``. Built from a QR decomposition of the constraint
    row ``C = 1' X``, dropping its first column.
    """

    Z: np.ndarray

    def expand(self, beta) -> np.ndarray:
        return self.Z @ np.asarray(beta, dtype=float)

    def apply(self, design) -> np.ndarray:
        return np.asarray(design) @ self.Z

    def penalty(self, P) -> np.ndarray:
        return self.Z.T @ P @ self.Z


def centering_transform(design) -> tuple[np.ndarray, ConstraintTransform]:
    """Reparameterize ``design`` so every fit sums to zero over its rows.

    Returns the constrained design (one column fewer) and the transform.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise NumericError("centering needs a design with at least two columns")
    C = X.sum(axis=0)
    scale = np.abs(X).sum()
    if not np.isfinite(C).all() or np.linalg.norm(C) <= 1e-12 * max(scale, 1.0):
        raise NumericError("centering constraint is rank deficient (column sums vanish)")
    Q, _ = np.linalg.qr(C[:, None], mode="complete")
    ct = ConstraintTransform(Q[:, 1:])
    return ct.apply(X), ct
