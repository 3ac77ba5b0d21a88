"""Functional principal component analysis of the response process.

Three-step estimation on a common evaluation grid:

1. mean: one pooled penalized-spline fit over all observations;
2. covariance: for densely observed subjects, the sample covariance of
   per-curve penalized-spline smooths; for sparse designs, pooled raw
   cross-products with the same-observation diagonal removed, then a
   tensor-product surface smoother;
3. eigendecomposition of the covariance operator discretized with
   trapezoid quadrature weights, truncated by a proportion-of-variance
   rule, followed by numerical integration (dense) or best-linear
   prediction (sparse) of the subject scores.

The same binned machinery decomposes the covariance of regression
residual curves into a smooth low-rank part plus a white-noise nugget,
which is what the prediction bands use for the new-observation noise.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import basis as _basis
from .errors import (
    DegenerateCovariance,
    GcvDegenerate,
    GridMismatch,
    GridTooShort,
    ScoreUndefined,
    TooFewSubjects,
)
from .funcdata import FunctionalDataset, _smooth_matrix, trapezoid_rule

__all__ = [
    "EigenBasis",
    "ScoreMatrix",
    "ErrorCovariance",
    "CovarianceEstimate",
    "FpcaResult",
    "estimate_mean",
    "estimate_covariance",
    "eigendecompose",
    "compute_scores",
    "decompose_error_covariance",
    "fit_response_fpca",
]

_COV_LAMBDA_GRID = np.logspace(-8, 6, 15)


@dataclass(frozen=True)
class EigenBasis:
    """Truncated eigensystem of the response covariance.

    Eigenfunctions are stored on ``grid`` and orthonormal with respect
    to trapezoid quadrature on it; off-grid evaluation interpolates
    linearly.  ``pve`` is the fraction of (positive) spectral mass the
    kept components explain; ``nugget`` is the white-noise variance
    estimated alongside the covariance (used for sparse-design scores).
    """

    grid: np.ndarray
    mean: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    pve: float
    total_variance: float
    nugget: float = 0.0

    @property
    def n_components(self) -> int:
        return int(self.eigenvalues.size)

    def eval_mean(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=float), self.grid, self.mean)

    def eval_eigenfunctions(self, t) -> np.ndarray:
        return _interp_columns(self.grid, self.eigenfunctions, t)


@dataclass(frozen=True)
class ScoreMatrix:
    """Estimated scores and their (shared) sampling covariance."""

    scores: np.ndarray
    score_cov: np.ndarray
    design: str


@dataclass(frozen=True)
class ErrorCovariance:
    """Residual-process covariance: smooth low-rank part plus nugget."""

    grid: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    nugget: float

    def smooth_at(self, t) -> np.ndarray:
        """Smooth covariance matrix evaluated on the points ``t``."""
        if self.eigenvalues.size == 0:
            t = np.asarray(t, dtype=float)
            return np.zeros((t.size, t.size))
        phi = _interp_columns(self.grid, self.eigenfunctions, t)
        return (phi * self.eigenvalues) @ phi.T

    def variance_at(self, t) -> np.ndarray:
        """Pointwise variance of a new error curve: smooth diag + nugget."""
        t = np.asarray(t, dtype=float)
        if self.eigenvalues.size == 0:
            return np.full(t.size, self.nugget)
        phi = _interp_columns(self.grid, self.eigenfunctions, t)
        return (phi**2 * self.eigenvalues).sum(axis=1) + self.nugget


@dataclass(frozen=True)
class CovarianceEstimate:
    """Covariance matrix on a grid plus the byproducts of estimating it."""

    cov: np.ndarray
    nugget: float
    grid: np.ndarray
    curves: np.ndarray | None  # dense path: smoothed curves on the grid


def estimate_mean(dataset: FunctionalDataset, grid, *, n_basis: int = 25,
                  lam: float | None = None) -> np.ndarray:
    """Pooled penalized-spline estimate of the mean function on ``grid``.

    All observations of all subjects enter one penalized least-squares
    fit; the penalty level is chosen by GCV unless ``lam`` is given.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2:
        raise GridTooShort("evaluation grid needs at least 2 points")
    if dataset.n_subjects < 2:
        raise TooFewSubjects("mean estimation needs at least 2 subjects")
    domain = dataset.response_domain
    n_basis = min(int(n_basis), max(4, sum(r.t_grid.size for r in dataset)))
    bas = _basis.make_basis(domain, max(4, n_basis), degree=3)
    penalty = _basis.second_derivative_penalty(bas).matrix
    btb = np.zeros((bas.n_basis, bas.n_basis))
    bty = np.zeros(bas.n_basis)
    yty = 0.0
    n_obs = 0
    for t_key, group in _group_by_grid(dataset).items():
        t_grid, y_rows = group
        design = bas.evaluate(t_grid)
        btb += len(y_rows) * (design.T @ design)
        y_sum = np.sum(y_rows, axis=0)
        bty += design.T @ y_sum
        yty += float(sum(np.dot(y, y) for y in y_rows))
        n_obs += len(y_rows) * t_grid.size
    coef = _gcv_pooled(btb, bty, yty, n_obs, penalty, lam)
    return bas.evaluate(grid) @ coef


def _group_by_grid(dataset: FunctionalDataset) -> dict:
    """Group subjects by identical response grids (dense fast path)."""
    groups: dict[bytes, tuple] = {}
    for rec in dataset:
        key = rec.t_grid.tobytes()
        if key not in groups:
            groups[key] = (rec.t_grid, [])
        groups[key][1].append(rec.y_values)
    return groups


def _gcv_pooled(btb, bty, yty, n_obs, penalty, lam):
    """Penalized solve with GCV over the penalty level (pooled form)."""
    if lam is not None:
        return cho_solve(cho_factor(btb + float(lam) * penalty), bty)
    scale = np.trace(btb) / max(np.trace(penalty), np.finfo(float).tiny)
    best = (np.inf, None)
    for lam_c in _COV_LAMBDA_GRID * scale:
        try:
            factor = cho_factor(btb + lam_c * penalty)
        except LinAlgError:
            continue
        coef = cho_solve(factor, bty)
        edf = np.trace(cho_solve(factor, btb))
        denom = 1.0 - edf / n_obs
        if denom <= 1e-10:
            continue
        rss = max(yty - 2.0 * (coef @ bty) + coef @ (btb @ coef), 0.0)
        score = rss / denom**2
        if score < best[0]:
            best = (score, coef)
    if best[1] is None:
        raise GcvDegenerate("pooled mean smoother: no valid penalty candidate")
    return best[1]


def estimate_covariance(dataset: FunctionalDataset, mean_values, grid, *,
                        design: str = "dense", n_basis_smooth: int = 25,
                        n_basis_cov: int = 10) -> CovarianceEstimate:
    """Covariance of the response process on ``grid``.

    Dense path: sample covariance of per-curve penalized-spline smooths
    (the smoothing already removes measurement noise); the nugget is the
    mean squared per-curve smoothing residual.  Sparse path: pooled raw
    cross-products of de-meaned observations with the same-observation
    diagonal excluded, smoothed by a tensor-product spline surface; the
    nugget is the average gap between the raw pooled variance on the
    diagonal and the smooth surface there, clipped at zero.
    """
    grid = np.asarray(grid, dtype=float)
    mean_values = np.asarray(mean_values, dtype=float)
    if grid.size < 2:
        raise GridTooShort("evaluation grid needs at least 2 points")
    if mean_values.shape != grid.shape:
        raise GridMismatch("mean and grid must have the same length")
    if dataset.n_subjects < 2:
        raise TooFewSubjects("covariance estimation needs at least 2 subjects")
    if design == "dense":
        curves, nugget = _smooth_all_curves(dataset, grid, n_basis_smooth)
        centered = curves - mean_values[None, :]
        cov = (centered.T @ centered) / (dataset.n_subjects - 1)
        return CovarianceEstimate(cov=cov, nugget=nugget, grid=grid, curves=curves)
    if design != "sparse":
        raise ValueError(f"design must be 'dense' or 'sparse', got {design!r}")
    t_list = [rec.t_grid for rec in dataset]
    e_list = [rec.y_values - np.interp(rec.t_grid, grid, mean_values) for rec in dataset]
    cov, nugget = _binned_covariance(t_list, e_list, grid, dataset.response_domain,
                                     n_basis_cov)
    return CovarianceEstimate(cov=cov, nugget=nugget, grid=grid, curves=None)


def _smooth_all_curves(dataset: FunctionalDataset, grid, n_basis_smooth):
    """Smooth every response curve, evaluate on ``grid``; pooled nugget."""
    n = dataset.n_subjects
    curves = np.zeros((n, grid.size))
    sq_resid = 0.0
    n_obs = 0
    index_of = {id(rec): i for i, rec in enumerate(dataset.subjects)}
    groups: dict[bytes, list] = {}
    for rec in dataset:
        groups.setdefault(rec.t_grid.tobytes(), []).append(rec)
    for recs in groups.values():
        t_grid = recs[0].t_grid
        y_mat = np.column_stack([rec.y_values for rec in recs])
        bas, coefs, _ = _smooth_matrix(
            t_grid, y_mat, domain=dataset.response_domain,
            n_basis=min(n_basis_smooth, t_grid.size),
        )
        fitted_own = bas.evaluate(t_grid) @ coefs
        sq_resid += float(((y_mat - fitted_own) ** 2).sum())
        n_obs += y_mat.size
        on_grid = bas.evaluate(grid) @ coefs
        for j, rec in enumerate(recs):
            curves[index_of[id(rec)]] = on_grid[:, j]
    return curves, sq_resid / max(n_obs, 1)


def _binned_covariance(t_list, e_list, grid, domain, n_basis_cov, *,
                       return_raw: bool = False):
    """Pooled cross-product covariance smoothing on a grid.

    Observations are snapped to the nearest grid node; all ordered pairs
    of distinct observations within a subject contribute to the
    off-diagonal cell sums, and squared observations to the raw
    diagonal.  A tensor-product cubic spline surface is fit to the cell
    means by penalized weighted least squares (weights = cell counts,
    penalty level by GCV), evaluated back on the grid, symmetrized and
    eigenvalue-clipped to be positive semidefinite.
    """
    grid = np.asarray(grid, dtype=float)
    n_grid = grid.size
    mids = (grid[1:] + grid[:-1]) / 2.0
    s_sum = np.zeros((n_grid, n_grid))
    s_cnt = np.zeros((n_grid, n_grid))
    d_sum = np.zeros(n_grid)
    d_cnt = np.zeros(n_grid)
    for t, e in zip(t_list, e_list):
        idx = np.searchsorted(mids, t)
        outer = np.outer(e, e)
        np.add.at(s_sum, (idx[:, None], idx[None, :]), outer)
        np.add.at(s_cnt, (idx[:, None], idx[None, :]), np.ones_like(outer))
        # remove the same-observation diagonal (it carries the nugget)
        np.add.at(s_sum, (idx, idx), -(e**2))
        np.add.at(s_cnt, (idx, idx), -1.0)
        np.add.at(d_sum, idx, e**2)
        np.add.at(d_cnt, idx, 1.0)
    if not np.any(s_cnt > 0):
        raise DegenerateCovariance(
            "no off-diagonal covariance information (all subjects have a single point?)"
        )
    bas = _basis.make_basis((grid[0], grid[-1]) if domain is None else domain,
                            min(n_basis_cov, max(4, n_grid)), degree=3)
    b_grid = bas.evaluate(grid)
    k = bas.n_basis
    pen1 = _basis.second_derivative_penalty(bas).matrix
    eye = np.eye(k)
    pen = np.kron(pen1, eye) + np.kron(eye, pen1)
    # weighted tensor normal equations assembled cell-wise
    inner = np.einsum("ab,bl,bm->alm", s_cnt, b_grid, b_grid, optimize=True)
    mmat = np.einsum("ak,aj,alm->kljm", b_grid, b_grid, inner, optimize=True)
    mmat = mmat.reshape(k * k, k * k)
    rhs = (b_grid.T @ s_sum @ b_grid).reshape(-1)
    n_cells = int((s_cnt > 0).sum())
    theta = _gcv_surface(mmat, rhs, pen, n_cells, s_sum, s_cnt, b_grid)
    surf = b_grid @ theta.reshape(k, k) @ b_grid.T
    surf = (surf + surf.T) / 2.0
    eigval, eigvec = np.linalg.eigh(surf)
    surf = (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
    mask = d_cnt > 0
    gap = d_sum[mask].sum() - (d_cnt[mask] * np.diag(surf)[mask]).sum()
    nugget = gap / d_cnt[mask].sum()
    if nugget < 0:
        warnings.warn(f"negative nugget estimate ({nugget:.3e}) clipped to zero",
                      stacklevel=2)
        nugget = 0.0
    if return_raw:
        with np.errstate(invalid="ignore"):
            raw = np.where(s_cnt > 0, s_sum / np.where(s_cnt > 0, s_cnt, 1.0), np.nan)
        return surf, float(nugget), raw
    return surf, float(nugget)


def _gcv_surface(mmat, rhs, pen, n_cells, s_sum, s_cnt, b_grid):
    """GCV for the weighted covariance surface smoother.

    The weighted residual sum of squares only needs cell-level
    sufficient statistics: sum_w z^2 - 2 theta'rhs + theta'M theta,
    where sum_w z^2 = sum of (cell sum)^2 / count.
    """
    k2 = mmat.shape[0]
    mask = s_cnt > 0
    zz = float((s_sum[mask] ** 2 / s_cnt[mask]).sum())
    scale = np.trace(mmat) / max(np.trace(pen), np.finfo(float).tiny)
    best = (np.inf, None)
    for lam_c in _COV_LAMBDA_GRID * scale:
        try:
            factor = cho_factor(mmat + lam_c * pen)
        except LinAlgError:
            continue
        theta = cho_solve(factor, rhs)
        edf = np.trace(cho_solve(factor, mmat))
        denom = 1.0 - edf / n_cells
        if denom <= 1e-10:
            continue
        rss = max(zz - 2.0 * (theta @ rhs) + theta @ (mmat @ theta), 0.0)
        score = rss / denom**2
        if score < best[0]:
            best = (score, theta)
    if best[1] is None:
        raise GcvDegenerate("covariance surface smoother: no valid penalty candidate")
    return best[1]


def eigendecompose(cov, grid, pve: float = 0.95, *, mean=None, nugget: float = 0.0,
                   k_max: int | None = None) -> EigenBasis:
    """Quadrature-weighted eigendecomposition truncated by variance explained.

    With W the diagonal trapezoid-weight matrix, the symmetric problem
    ``W^(1/2) C W^(1/2)`` is decomposed; eigenfunctions are rescaled so
    they are orthonormal in the quadrature inner product, eigenvalues
    estimate those of the covariance operator.  Negative eigenvalues are
    clipped to zero before the proportion-of-variance rule picks the
    smallest K reaching ``pve``.  Signs are fixed so the first
    significant coordinate of each eigenfunction is positive; exact
    eigenvalue ties are ordered by the index of the first sign change.
    """
    grid = np.asarray(grid, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if grid.size < 2:
        raise GridTooShort("eigendecomposition grid needs at least 2 points")
    if cov.shape != (grid.size, grid.size):
        raise GridMismatch(f"covariance shape {cov.shape} does not match grid size {grid.size}")
    if not (0.0 < pve <= 1.0):
        raise ValueError(f"pve must be in (0, 1], got {pve}")
    weights = trapezoid_rule(grid).weights
    root_w = np.sqrt(weights)
    sym = root_w[:, None] * cov * root_w[None, :]
    sym = (sym + sym.T) / 2.0
    eigval, eigvec = np.linalg.eigh(sym)
    eigval, eigvec = eigval[::-1], eigvec[:, ::-1]
    eigval = np.clip(eigval, 0.0, None)
    total = float(eigval.sum())
    if not total > 0:
        raise DegenerateCovariance("covariance is numerically zero")
    cum = np.cumsum(eigval) / total
    n_keep = int(np.searchsorted(cum, pve - 1e-12) + 1)
    if k_max is not None:
        n_keep = min(n_keep, int(k_max))
    n_keep = max(1, min(n_keep, int((eigval > 0).sum())))
    phi = eigvec[:, :n_keep] / root_w[:, None]
    phi = _fix_signs(phi)
    order = _tie_break_order(eigval[:n_keep], phi)
    phi = phi[:, order]
    kept = eigval[:n_keep][order]
    return EigenBasis(
        grid=grid,
        mean=np.zeros(grid.size) if mean is None else np.asarray(mean, dtype=float),
        eigenfunctions=phi,
        eigenvalues=kept,
        pve=float(cum[n_keep - 1]),
        total_variance=total,
        nugget=float(nugget),
    )


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    phi = phi.copy()
    for j in range(phi.shape[1]):
        col = phi[:, j]
        big = np.flatnonzero(np.abs(col) > 1e-8 * np.abs(col).max())
        if big.size and col[big[0]] < 0:
            phi[:, j] = -col
    return phi


def _first_sign_change(col: np.ndarray) -> int:
    signs = np.sign(col[np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300)])
    flips = np.flatnonzero(signs[1:] != signs[:-1])
    return int(flips[0]) if flips.size else col.size + 1


def _tie_break_order(eigval: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Stable order: eigenvalue descending, ties by first sign change."""
    order = np.arange(eigval.size)
    keys = [
        (-eigval[j], _first_sign_change(phi[:, j]) if _has_tie(eigval, j) else 0, j)
        for j in order
    ]
    return np.array([j for _, _, j in sorted(keys)], dtype=int)


def _has_tie(eigval: np.ndarray, j: int) -> bool:
    others = np.delete(eigval, j)
    return bool(np.any(np.isclose(others, eigval[j], rtol=1e-10, atol=0.0)))


def compute_scores(dataset: FunctionalDataset, eigenbasis: EigenBasis, design: str,
                   *, curves=None, cov=None, n_basis_smooth: int = 25) -> ScoreMatrix:
    """Subject scores on the truncated eigenbasis.

    Dense path: numerical integration of the de-meaned smoothed curves
    against each eigenfunction; the score covariance is diagonal with
    entries given by the double quadrature of the covariance surface
    against each eigenfunction (its eigenvalue, up to quadrature).
    Sparse path: best linear prediction from the raw de-meaned
    observations using the truncated covariance model plus nugget; the
    score covariance is the subject-averaged covariance of the linear
    predictor.
    """
    grid = eigenbasis.grid
    n_comp = eigenbasis.n_components
    weights = trapezoid_rule(grid).weights
    if design == "dense":
        if curves is None:
            curves, _ = _smooth_all_curves(dataset, grid, n_basis_smooth)
        centered = np.asarray(curves, dtype=float) - eigenbasis.mean[None, :]
        scores = (centered * weights[None, :]) @ eigenbasis.eigenfunctions
        if cov is not None:
            wphi = weights[:, None] * eigenbasis.eigenfunctions
            nu = np.diag(np.einsum("tk,tu,uk->k", wphi, np.asarray(cov, dtype=float), wphi))
        else:
            nu = np.diag(eigenbasis.eigenvalues)
        return ScoreMatrix(scores=scores, score_cov=nu, design="dense")
    if design != "sparse":
        raise ValueError(f"design must be 'dense' or 'sparse', got {design!r}")
    lam_diag = eigenbasis.eigenvalues
    floor = 1e-8 * float(lam_diag.mean()) + np.finfo(float).tiny
    noise = max(eigenbasis.nugget, floor)
    scores = np.zeros((dataset.n_subjects, n_comp))
    nu_acc = np.zeros((n_comp, n_comp))
    for i, rec in enumerate(dataset):
        if rec.t_grid.size == 0:
            raise ScoreUndefined(f"subject {rec.subject_id} has no response observations")
        phi_i = eigenbasis.eval_eigenfunctions(rec.t_grid)
        y_c = rec.y_values - eigenbasis.eval_mean(rec.t_grid)
        gain = np.linalg.solve(
            (phi_i * lam_diag) @ phi_i.T + noise * np.eye(rec.t_grid.size),
            phi_i * lam_diag,
        )  # (m_i, K): rows solve to Lambda Phi' applied from the left
        scores[i] = y_c @ gain
        nu_acc += (lam_diag[:, None] * phi_i.T) @ gain
    return ScoreMatrix(scores=scores, score_cov=nu_acc / dataset.n_subjects, design="sparse")


def decompose_error_covariance(t_list, e_list, grid, *, domain=None,
                               n_basis_cov: int = 10) -> ErrorCovariance:
    """Split residual-curve covariance into smooth part plus nugget.

    Residual curves are treated as mean zero (they come from a fitted
    model), so no de-meaning is applied; any unexplained systematic
    structure deliberately stays in the estimate, which keeps prediction
    bands honest rather than optimistic.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2:
        raise GridTooShort("error-covariance grid needs at least 2 points")
    surf, nugget = _binned_covariance(t_list, e_list, grid, domain, n_basis_cov)
    weights = trapezoid_rule(grid).weights
    root_w = np.sqrt(weights)
    sym = root_w[:, None] * surf * root_w[None, :]
    eigval, eigvec = np.linalg.eigh((sym + sym.T) / 2.0)
    eigval, eigvec = eigval[::-1], eigvec[:, ::-1]
    keep = eigval > max(1e-10 * max(eigval[0], 0.0), 1e-14 * max(nugget, 1e-300))
    n_keep = int(keep.sum())
    phi = _fix_signs(eigvec[:, :n_keep] / root_w[:, None]) if n_keep else np.zeros((grid.size, 0))
    return ErrorCovariance(
        grid=grid,
        eigenfunctions=phi,
        eigenvalues=eigval[:n_keep] if n_keep else np.zeros(0),
        nugget=float(nugget),
    )


@dataclass(frozen=True)
class FpcaResult:
    """Everything the regression stage needs from the response FPCA."""

    eigenbasis: EigenBasis
    scores: ScoreMatrix
    cov: CovarianceEstimate
    design: str
    grid: np.ndarray


def fit_response_fpca(dataset: FunctionalDataset, *, design: str = "auto",
                      pve: float = 0.95, grid_size: int = 101,
                      n_basis_smooth: int = 25, n_basis_cov: int = 10,
                      k_max: int | None = None) -> FpcaResult:
    """Run the full response-side FPCA pipeline on a common grid."""
    if design == "auto":
        design = "dense" if dataset.common_response_grid() is not None else "sparse"
    lo, hi = dataset.response_domain
    grid = np.linspace(lo, hi, int(grid_size))
    mean_values = estimate_mean(dataset, grid, n_basis=n_basis_smooth)
    cov_est = estimate_covariance(dataset, mean_values, grid, design=design,
                                  n_basis_smooth=n_basis_smooth, n_basis_cov=n_basis_cov)
    eigen = eigendecompose(cov_est.cov, grid, pve, mean=mean_values,
                           nugget=cov_est.nugget, k_max=k_max)
    scores = compute_scores(dataset, eigen, design, curves=cov_est.curves,
                            cov=cov_est.cov, n_basis_smooth=n_basis_smooth)
    return FpcaResult(eigenbasis=eigen, scores=scores, cov=cov_est, design=design, grid=grid)


def _interp_columns(grid: np.ndarray, matrix: np.ndarray, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((t.size, matrix.shape[1]))
    for j in range(matrix.shape[1]):
        out[:, j] = np.interp(t, grid, matrix[:, j])
    return out
