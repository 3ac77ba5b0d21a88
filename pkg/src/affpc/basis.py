"""Univariate B-spline bases: construction, orthonormalization, penalties.

A basis lives on a closed interval [a, b] and uses the open-uniform knot
vector: full multiplicity ``degree + 1`` at both boundaries and equally
spaced interior knots.  Orthonormalization rotates the raw system by the
inverse symmetric square root of its Gram matrix, so the span is
unchanged while the basis functions become orthonormal in L2[a, b].
Penalty matrices follow the same change of coordinates.

All integrals here (Gram and curvature penalties) are exact: the
integrands are piecewise polynomials, so per-knot-span Gauss-Legendre
rules of sufficient order integrate them without error.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import BSpline

from .errors import InvalidBasisSize, OutOfDomain, SingularGram

__all__ = [
    "BSplineBasis",
    "PenaltyMatrix",
    "make_basis",
    "orthonormalize",
    "second_derivative_penalty",
    "greville_abscissae",
    "affine_coefficients",
]

# Relative tolerance for accepting points that sit on the boundary up to
# floating point noise.
_DOMAIN_RTOL = 1e-10


@dataclass(frozen=True)
class PenaltyMatrix:
    """Symmetric positive semidefinite quadratic-form matrix.

    ``coef @ matrix @ coef`` is the integrated squared second derivative
    of the spline with those coefficients, in the coordinate system of
    the basis the penalty was computed for.
    """

    matrix: np.ndarray


@dataclass(frozen=True)
class BSplineBasis:
    """B-spline basis on a closed interval.

    Attributes
    ----------
    domain : (float, float)
        Interval [a, b] the basis lives on.
    degree : int
        Polynomial degree of each piece (3 = cubic).
    n_basis : int
        Number of basis functions K.
    knots : ndarray
        Full knot vector of length K + degree + 1.
    orthonormalized : bool
        Whether evaluation applies the orthonormalizing transform.
    transform_matrix : ndarray or None
        K x K change-of-coordinates matrix T; evaluation returns
        ``raw(points) @ T`` when set.
    """

    domain: tuple[float, float]
    degree: int
    n_basis: int
    knots: np.ndarray
    orthonormalized: bool = False
    transform_matrix: np.ndarray | None = None

    def _check_domain(self, points: np.ndarray) -> np.ndarray:
        a, b = self.domain
        tol = _DOMAIN_RTOL * (b - a)
        if points.size and (points.min() < a - tol or points.max() > b + tol):
            bad = points[(points < a - tol) | (points > b + tol)]
            raise OutOfDomain(
                f"evaluation points outside [{a}, {b}]: e.g. {bad.flat[0]!r}"
            )
        return np.clip(points, a, b)

    def evaluate(self, points) -> np.ndarray:
        """Evaluate every basis function at ``points``.

        Returns an array of shape ``(len(points), n_basis)``.  Points
        outside the domain raise :class:`OutOfDomain`.
        """
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        pts = self._check_domain(pts)
        design = BSpline.design_matrix(pts, self.knots, self.degree).toarray()
        if self.orthonormalized:
            design = design @ self.transform_matrix
        return design

    def derivative(self, points, order: int = 1) -> np.ndarray:
        """Evaluate the ``order``-th derivative of every basis function."""
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        pts = self._check_domain(pts)
        if order >= self.degree + 1:
            vals = np.zeros((pts.size, self.n_basis))
        else:
            spline = BSpline(self.knots, np.eye(self.n_basis), self.degree)
            vals = spline.derivative(order)(pts)
        if self.orthonormalized:
            vals = vals @ self.transform_matrix
        return vals

    def gram(self) -> np.ndarray:
        """Exact Gram matrix of the current coordinate system."""
        nodes, weights = _span_quadrature(self.knots, self.degree + 1)
        design = self.evaluate(nodes)
        return (design * weights[:, None]).T @ design


def make_basis(domain, n_basis: int, degree: int = 3) -> BSplineBasis:
    """Build a raw (non-orthonormalized) open-uniform B-spline basis.

    Parameters
    ----------
    domain : (float, float)
        Finite interval [a, b] with a < b.
    n_basis : int
        Number of basis functions; must be at least ``degree + 1``.
    degree : int
        Piecewise polynomial degree, at least 1.
    """
    a, b = (float(domain[0]), float(domain[1]))
    if not (np.isfinite(a) and np.isfinite(b) and a < b):
        raise InvalidBasisSize(f"domain must be finite with a < b, got ({a}, {b})")
    if int(degree) != degree or degree < 1:
        raise InvalidBasisSize(f"degree must be an integer >= 1, got {degree}")
    degree = int(degree)
    if int(n_basis) != n_basis or n_basis < degree + 1:
        raise InvalidBasisSize(
            f"n_basis must be an integer >= degree + 1 = {degree + 1}, got {n_basis}"
        )
    n_basis = int(n_basis)
    interior = np.linspace(a, b, n_basis - degree + 1)[1:-1]
    knots = np.concatenate([np.full(degree + 1, a), interior, np.full(degree + 1, b)])
    return BSplineBasis(domain=(a, b), degree=degree, n_basis=n_basis, knots=knots)


def orthonormalize(basis: BSplineBasis) -> BSplineBasis:
    """Return the basis rotated to be orthonormal in L2 on its domain.

    The transform is the inverse symmetric square root of the exact Gram
    matrix, so the span of the system is untouched.
    """
    if basis.orthonormalized:
        raise InvalidBasisSize("basis is already orthonormalized")
    transform = _inv_sqrt_psd(basis.gram())
    return replace(basis, orthonormalized=True, transform_matrix=transform)


def _inv_sqrt_psd(gram: np.ndarray) -> np.ndarray:
    """Inverse symmetric square root of a symmetric positive definite matrix."""
    eigval, eigvec = np.linalg.eigh((gram + gram.T) / 2.0)
    if eigval[0] <= 1e-12 * eigval[-1] or eigval[-1] <= 0:
        raise SingularGram(
            f"Gram matrix numerically singular (eigenvalue ratio "
            f"{eigval[0] / max(eigval[-1], np.finfo(float).tiny):.2e})"
        )
    return (eigvec / np.sqrt(eigval)) @ eigvec.T


def second_derivative_penalty(basis: BSplineBasis) -> PenaltyMatrix:
    """Exact integrated-squared-second-derivative penalty matrix.

    Computed in the coordinate system of ``basis``: for an
    orthonormalized basis this equals ``T' P_raw T`` where ``P_raw`` is
    the raw-system penalty and ``T`` the orthonormalizing transform.
    Bases of degree < 2 have identically zero curvature, so the penalty
    is the zero matrix (with a warning).
    """
    if basis.degree < 2:
        warnings.warn(
            f"degree {basis.degree} B-splines have zero second derivative; "
            "penalty matrix is identically zero",
            stacklevel=2,
        )
        return PenaltyMatrix(np.zeros((basis.n_basis, basis.n_basis)))
    # The integrand is piecewise polynomial of degree 2*(degree-2);
    # degree-1 Gauss nodes per span are exact up to degree 2*degree-3.
    nodes, weights = _span_quadrature(basis.knots, basis.degree - 1)
    deriv = basis.derivative(nodes, order=2)
    penalty = (deriv * weights[:, None]).T @ deriv
    return PenaltyMatrix((penalty + penalty.T) / 2.0)


def greville_abscissae(basis: BSplineBasis) -> np.ndarray:
    """Greville sites: running means of ``degree`` consecutive knots.

    In the raw system the coefficients ``a + b * greville`` reproduce
    the affine function a + b*u exactly.
    """
    knots, degree = basis.knots, basis.degree
    return np.array(
        [knots[l + 1 : l + 1 + degree].mean() for l in range(basis.n_basis)]
    )


def affine_coefficients(basis: BSplineBasis, intercept: float, slope: float) -> np.ndarray:
    """Coefficients representing u -> intercept + slope * u exactly.

    Returned in the coordinate system of ``basis`` (raw or
    orthonormalized).
    """
    coef = intercept + slope * greville_abscissae(basis)
    if basis.orthonormalized:
        coef = np.linalg.solve(basis.transform_matrix, coef)
    return coef


def _span_quadrature(knots: np.ndarray, n_nodes: int):
    """Gauss-Legendre nodes/weights applied on every nonempty knot span."""
    breaks = np.unique(knots)
    ref_x, ref_w = np.polynomial.legendre.leggauss(max(int(n_nodes), 1))
    lo, hi = breaks[:-1], breaks[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = (mid[:, None] + half[:, None] * ref_x[None, :]).ravel()
    weights = (half[:, None] * np.broadcast_to(ref_w, (lo.size, ref_w.size))).ravel()
    return nodes, weights
