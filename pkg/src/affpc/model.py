"""Additive function-on-function regression on principal-component scores.

The response curve is expanded in the truncated eigenbasis of its own
covariance.  Each score is regressed, by penalized least squares with a
closed-form solve, on a design vector whose entries integrate products
of B-spline functions of the standardized covariate value and of the
covariate argument:

    Z[i, (l, l')] = integral of B_x[l](Xstd_i(s)) * B_s[l'](s) ds,

so the fitted trivariate kernel is additive over s and nonlinear in x.
The anisotropic penalty is the Kronecker sum of univariate curvature
penalties, one level per direction, selected by GCV (default) or REML.
Setting the x-basis to affine functions recovers the ordinary linear
function-on-function model, which is also available directly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import basis as _basis
from . import fpca as _fpca
from .errors import (
    DegenerateCovariate,
    GcvDegenerate,
    InvalidLambda,
    MissingCovariate,
    SingularSystem,
)
from .funcdata import (
    CovariateCurve,
    FunctionalDataset,
    _smooth_matrix,
    smooth_curve,
    trapezoid_rule,
)

__all__ = [
    "CovariateTransform",
    "DesignMatrix",
    "SolveResult",
    "LambdaSelection",
    "AffpcFit",
    "fit_transform",
    "build_design",
    "build_flm_design",
    "assemble_penalty",
    "solve",
    "select_lambda",
    "fit_affpc",
    "fit_flm",
    "evaluate_surface",
    "g_surface",
    "beta_surface",
    "predict_curve",
    "predict_dataset",
]

_DEFAULT_LAMBDA_GRID = np.logspace(-6.0, 6.0, 11)


# --- covariate standardization -------------------------------------------


@dataclass(frozen=True)
class CovariateTransform:
    """Pointwise standardization of the covariate process.

    ``apply`` maps (s, x) to (x - mean(s)) / sd(s), clamping the result
    into ``clamp_range`` (the padded range of the standardized training
    values) so downstream basis evaluation never leaves its domain.
    """

    grid: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    clamp_range: tuple[float, float]

    def apply(self, s_points, x_values, *, clamp: bool = True, warn: bool = True) -> np.ndarray:
        s_points = np.asarray(s_points, dtype=float)
        x_values = np.asarray(x_values, dtype=float)
        z = (x_values - np.interp(s_points, self.grid, self.mean)) / np.interp(
            s_points, self.grid, self.sd
        )
        if clamp:
            lo, hi = self.clamp_range
            n_out = int(((z < lo) | (z > hi)).sum())
            if n_out:
                if warn:
                    warnings.warn(
                        f"clamped {n_out} standardized covariate values into "
                        f"[{lo:.4g}, {hi:.4g}]",
                        stacklevel=2,
                    )
                z = np.clip(z, lo, hi)
        return z

    def invert(self, s_points, z_values) -> np.ndarray:
        """Map standardized values back to the original scale."""
        s_points = np.asarray(s_points, dtype=float)
        z_values = np.asarray(z_values, dtype=float)
        return z_values * np.interp(s_points, self.grid, self.sd) + np.interp(
            s_points, self.grid, self.mean
        )


def fit_transform(dataset: FunctionalDataset, *, grid_size: int = 101,
                  sd_floor: float = 1e-6, pad: float = 0.05) -> CovariateTransform:
    """Estimate the pointwise covariate mean and spread.

    When all subjects share one covariate grid the moments are exact
    pointwise statistics on it; otherwise both moment curves come from
    pooled penalized-spline smoothing (mean of values, then mean of
    squared residuals).  A pointwise standard deviation below
    ``sd_floor`` raises :class:`DegenerateCovariate`.
    """
    common = dataset.common_covariate_grid()
    if common is not None:
        x_mat = np.vstack([rec.x_values for rec in dataset])
        grid = common.astype(float)
        mean = x_mat.mean(axis=0)
        sd = x_mat.std(axis=0, ddof=1) if x_mat.shape[0] > 1 else np.zeros(grid.size)
    else:
        lo, hi = dataset.covariate_domain
        grid = np.linspace(lo, hi, int(grid_size))
        s_list = [rec.s_grid for rec in dataset]
        x_list = [rec.x_values for rec in dataset]
        mean = _pooled_curve(s_list, x_list, grid, dataset.covariate_domain)
        resid_sq = [
            (x - np.interp(s, grid, mean)) ** 2 for s, x in zip(s_list, x_list)
        ]
        variance = np.clip(_pooled_curve(s_list, resid_sq, grid, dataset.covariate_domain), 0.0, None)
        sd = np.sqrt(variance)
    if np.any(sd < sd_floor):
        raise DegenerateCovariate(
            f"pointwise covariate sd below floor {sd_floor:g}; "
            "standardization undefined (constant covariate?)"
        )
    z_min, z_max = np.inf, -np.inf
    for rec in dataset:
        z = (rec.x_values - np.interp(rec.s_grid, grid, mean)) / np.interp(rec.s_grid, grid, sd)
        z_min = min(z_min, float(z.min()))
        z_max = max(z_max, float(z.max()))
    span = z_max - z_min
    if not span > 0:
        raise DegenerateCovariate("standardized covariate values are all identical")
    clamp = (z_min - pad * span, z_max + pad * span)
    return CovariateTransform(grid=grid, mean=mean, sd=sd, clamp_range=clamp)


def _pooled_curve(s_list, v_list, grid, domain, n_basis: int = 25):
    """Pooled penalized-spline fit of scattered (s, v) observations."""
    bas = _basis.make_basis(domain, n_basis, degree=3)
    penalty = _basis.second_derivative_penalty(bas).matrix
    btb = np.zeros((n_basis, n_basis))
    bty = np.zeros(n_basis)
    vtv = 0.0
    n_obs = 0
    groups: dict[bytes, list] = {}
    for s, v in zip(s_list, v_list):
        groups.setdefault(s.tobytes(), [s, []])[1].append(v)
    for s, vs in groups.values():
        design = bas.evaluate(s)
        btb += len(vs) * (design.T @ design)
        bty += design.T @ np.sum(vs, axis=0)
        vtv += float(sum(np.dot(v, v) for v in vs))
        n_obs += len(vs) * s.size
    coef = _fpca._gcv_pooled(btb, bty, vtv, n_obs, penalty, None)
    return bas.evaluate(grid) @ coef


# --- design assembly -------------------------------------------------------


@dataclass(frozen=True)
class DesignMatrix:
    """Regression design with optional augmented leading columns.

    Columns are ``[intercept?, scalars..., functional block]``; the
    functional block is indexed row-major in (l, l'), i.e. the x-basis
    index varies slowest.
    """

    matrix: np.ndarray
    n_aug: int
    kx: int
    ks: int
    model: str
    scalar_names: tuple[str, ...] = ()
    include_intercept: bool = False

    @property
    def n_subjects(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_coef(self) -> int:
        return self.matrix.shape[1]

    def col_of(self, l: int, lp: int) -> int:
        """Column index of functional coefficient (l, l')."""
        return self.n_aug + l * self.ks + lp


def _aug_row(rec_scalars, include_intercept, scalar_names):
    parts = []
    if include_intercept:
        parts.append(1.0)
    if scalar_names:
        if rec_scalars is None or len(rec_scalars) < len(scalar_names):
            raise MissingCovariate(
                f"scalar covariates {scalar_names} requested but not present"
            )
        parts.extend(float(v) for v in rec_scalars[: len(scalar_names)])
    return parts


def build_design(dataset: FunctionalDataset, transform: CovariateTransform,
                 basis_x: _basis.BSplineBasis, basis_s: _basis.BSplineBasis, *,
                 include_intercept: bool = False, use_scalars: bool = False,
                 clamp: bool = True) -> DesignMatrix:
    """Integrated tensor-product design rows, one per subject.

    Each functional entry integrates B_x[l](standardized x(s)) times
    B_s[l'](s) by trapezoid quadrature on the subject's own covariate
    grid.  Standardized values are clamped into the transform's range
    (with a warning) unless ``clamp`` is disabled, in which case
    :class:`OutOfDomain` propagates from the basis.
    """
    scalar_names = dataset.scalar_names if use_scalars else ()
    if use_scalars and not dataset.scalar_names:
        raise MissingCovariate("use_scalars=True but the dataset has no scalar covariates")
    n_aug = int(include_intercept) + len(scalar_names)
    rows = np.empty((dataset.n_subjects, n_aug + basis_x.n_basis * basis_s.n_basis))
    n_clamped = 0
    for i, rec in enumerate(dataset):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            z = transform.apply(rec.s_grid, rec.x_values, clamp=clamp, warn=True)
            n_clamped += sum(1 for w in caught if "clamped" in str(w.message))
        bx = basis_x.evaluate(z)
        bs = basis_s.evaluate(rec.s_grid)
        w = trapezoid_rule(rec.s_grid).weights
        block = np.einsum("a,ak,al->kl", w, bx, bs).ravel()
        rows[i] = _aug_row(rec.scalar_covariates, include_intercept, scalar_names) + list(block) \
            if n_aug else block
    if n_clamped:
        warnings.warn(
            f"standardized covariate values clamped for {n_clamped} subjects",
            stacklevel=2,
        )
    return DesignMatrix(matrix=rows, n_aug=n_aug, kx=basis_x.n_basis,
                        ks=basis_s.n_basis, model="affpc",
                        scalar_names=scalar_names, include_intercept=include_intercept)


def build_flm_design(dataset: FunctionalDataset, basis_s: _basis.BSplineBasis, *,
                     include_intercept: bool = True,
                     use_scalars: bool = False) -> DesignMatrix:
    """Linear-model design: entries integrate x(s) * B_s[l'](s) ds."""
    scalar_names = dataset.scalar_names if use_scalars else ()
    if use_scalars and not dataset.scalar_names:
        raise MissingCovariate("use_scalars=True but the dataset has no scalar covariates")
    n_aug = int(include_intercept) + len(scalar_names)
    rows = np.empty((dataset.n_subjects, n_aug + basis_s.n_basis))
    for i, rec in enumerate(dataset):
        bs = basis_s.evaluate(rec.s_grid)
        w = trapezoid_rule(rec.s_grid).weights
        block = (w * rec.x_values) @ bs
        aug = _aug_row(rec.scalar_covariates, include_intercept, scalar_names)
        rows[i] = aug + list(block) if n_aug else block
    return DesignMatrix(matrix=rows, n_aug=n_aug, kx=1, ks=basis_s.n_basis,
                        model="flm", scalar_names=scalar_names,
                        include_intercept=include_intercept)


def assemble_penalty(penalty_x, penalty_s, lam, n_augmented: int = 0) -> np.ndarray:
    """Kronecker-sum anisotropic penalty with a leading zero block.

    Returns ``blockdiag(0, lam_x * Px (x) I + lam_s * I (x) Ps)`` where
    the zero block covers ``n_augmented`` unpenalized columns.
    """
    lam_x, lam_s = (float(lam[0]), float(lam[1]))
    for value in (lam_x, lam_s):
        if not (np.isfinite(value) and value >= 0.0):
            raise InvalidLambda(f"penalty levels must be finite and >= 0, got {lam}")
    px = penalty_x.matrix if hasattr(penalty_x, "matrix") else np.asarray(penalty_x)
    ps = penalty_s.matrix if hasattr(penalty_s, "matrix") else np.asarray(penalty_s)
    kx, ks = px.shape[0], ps.shape[0]
    core = lam_x * np.kron(px, np.eye(ks)) + lam_s * np.kron(np.eye(kx), ps)
    if n_augmented == 0:
        return core
    full = np.zeros((n_augmented + kx * ks,) * 2)
    full[n_augmented:, n_augmented:] = core
    return full


def _gauge_penalty(design_mat: DesignMatrix, basis_x: _basis.BSplineBasis,
                   basis_s: _basis.BSplineBasis) -> np.ndarray | None:
    """Projector that pins the structurally unidentifiable tensor directions.

    Two exactness facts conspire against the tensor design: trapezoid
    quadrature integrates affine functions without error on any grid,
    and affine functions carry zero curvature.  The coefficient
    direction (constant in the covariate value) x (linear in the
    argument, centered to integrate to zero) is therefore annihilated by
    every design row and by the anisotropic penalty at every level,
    which leaves ``Z'Z + P`` singular up to rounding and makes the
    Cholesky factorization succeed or fail by luck.  An explicit
    intercept column adds a second such direction, intercept minus the
    tensor representation of the constant surface.

    Candidate directions are only deflated after verifying they are
    machine-precision null for the actual design rows, so irregular
    grids that break the exact cancellation are left alone.  Deflation
    adds a fixed multiple of the projector onto the verified directions:
    it pins coefficients the data cannot see, leaves every prediction
    unchanged (new design rows are orthogonal to the directions for the
    same reason the training rows are), and shifts both selection
    criteria by a constant in the penalty levels.
    """
    z = design_mat.matrix
    n_aug, p = design_mat.n_aug, design_mat.n_coef
    lo, hi = basis_s.domain
    a0 = _basis.affine_coefficients(basis_x, 1.0, 0.0)
    candidates = []
    u = np.zeros(p)
    u[n_aug:] = np.kron(a0, _basis.affine_coefficients(basis_s, -0.5 * (lo + hi), 1.0))
    candidates.append(u)
    if design_mat.include_intercept:
        v = np.zeros(p)
        v[0] = hi - lo
        v[n_aug:] = -np.kron(a0, _basis.affine_coefficients(basis_s, 1.0, 0.0))
        candidates.append(v)
    scale = max(float(np.abs(z).max()), 1.0)
    kept = []
    for vec in candidates:
        vec = vec / np.linalg.norm(vec)
        if np.abs(z @ vec).max() <= 1e-9 * scale:
            kept.append(vec)
    if not kept:
        return None
    directions = np.linalg.qr(np.column_stack(kept))[0]
    mu = max(float((z**2).sum()) / p, 1.0)
    return mu * (directions @ directions.T)


# --- closed-form solve ------------------------------------------------------


@dataclass
class SolveResult:
    """Solution of the penalized normal equations for all K scores.

    One symmetric factorization of ``Z'Z + P`` is shared across the K
    right-hand sides and kept for downstream variance computations.
    """

    theta: np.ndarray
    a_matrix: np.ndarray
    ztz: np.ndarray
    method: str
    _factor: tuple | None = field(default=None, repr=False)
    _pinv: np.ndarray | None = field(default=None, repr=False)

    def h_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply (Z'Z + P)^(-1) to a vector or matrix."""
        if self.method == "cholesky":
            if self._factor is None:
                self._factor = cho_factor(self.a_matrix)
            return cho_solve(self._factor, rhs)
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.a_matrix, hermitian=True)
        return self._pinv @ rhs


def solve(design, scores, penalty: np.ndarray, *, on_singular: str = "raise") -> SolveResult:
    """Closed-form penalized least squares, one factorization, K solves.

    ``theta[:, k]`` minimizes ``||scores[:, k] - Z theta||^2 +
    theta' P theta``.  A singular system raises
    :class:`SingularSystem` unless ``on_singular='lstsq'``, in which
    case the minimum-norm solution of the (consistent) normal equations
    is returned.
    """
    z = design.matrix if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    xi = scores.scores if isinstance(scores, _fpca.ScoreMatrix) else np.asarray(scores, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    if z.shape[0] != xi.shape[0]:
        raise ValueError(f"design has {z.shape[0]} rows, scores have {xi.shape[0]}")
    penalty = np.asarray(penalty, dtype=float)
    if penalty.shape != (z.shape[1], z.shape[1]):
        raise ValueError(f"penalty shape {penalty.shape} does not match {z.shape[1]} columns")
    ztz = z.T @ z
    a_matrix = ztz + penalty
    rhs = z.T @ xi
    try:
        factor = cho_factor(a_matrix)
    except LinAlgError:
        if on_singular != "lstsq":
            raise SingularSystem(
                "penalized normal equations are singular; raise the penalty "
                "levels or lower the number of basis functions"
            ) from None
        theta, *_ = np.linalg.lstsq(a_matrix, rhs, rcond=None)
        return SolveResult(theta=theta, a_matrix=a_matrix, ztz=ztz, method="lstsq")
    theta = cho_solve(factor, rhs)
    return SolveResult(theta=theta, a_matrix=a_matrix, ztz=ztz, method="cholesky",
                       _factor=factor)


# --- smoothing-parameter selection ------------------------------------------


@dataclass(frozen=True)
class LambdaSelection:
    """Chosen penalty levels plus the full search trace."""

    lam: tuple[float, float]
    criterion: str
    score: float
    trace: np.ndarray  # rows: lam_x, lam_s, score, edf
    refined: bool


def select_lambda(design, scores, penalty_x, penalty_s, *, criterion: str = "gcv",
                  lambda_grid=None, refine: bool = True,
                  extra_penalty: np.ndarray | None = None) -> LambdaSelection:
    """Search the anisotropic penalty levels on a log grid.

    GCV minimizes ``sum_k ||xi_k - Z theta_k||^2 / (1 - tr(S)/n)^2``
    with the smoother trace shared across scores; REML maximizes the sum
    over scores of restricted log-likelihoods of the equivalent
    variance-components model, profiling a per-score error variance.
    The grid winner is refined once on a finer local grid; near-ties
    resolve to the lexicographically smallest (lam_x, lam_s).

    ``extra_penalty`` is a fixed matrix added to every candidate system,
    used to pin structurally unidentifiable directions; because it does
    not vary with the penalty levels it shifts both criteria by a
    constant and leaves the selection unchanged.
    """
    if isinstance(design, DesignMatrix):
        n_aug = design.n_aug
        z = design.matrix
    else:
        z = np.asarray(design, dtype=float)
        n_aug = 0
    xi = scores.scores if isinstance(scores, _fpca.ScoreMatrix) else np.asarray(scores, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    px = penalty_x.matrix if hasattr(penalty_x, "matrix") else np.asarray(penalty_x)
    ps = penalty_s.matrix if hasattr(penalty_s, "matrix") else np.asarray(penalty_s)
    grid = _DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if np.any(grid <= 0):
        raise InvalidLambda("lambda grid entries must be positive")
    kx, ks = px.shape[0], ps.shape[0]
    term_x = _embed(np.kron(px, np.eye(ks)), n_aug)
    term_s = _embed(np.kron(np.eye(kx), ps), n_aug)

    if criterion == "reml":
        eig_x = np.linalg.eigvalsh((px + px.T) / 2.0)
        eig_s = np.linalg.eigvalsh((ps + ps.T) / 2.0)
        pair_x = np.repeat(np.clip(eig_x, 0.0, None), ks)
        pair_s = np.tile(np.clip(eig_s, 0.0, None), kx)

        def penalty_eigs(lam):
            eigs = lam[0] * pair_x + lam[1] * pair_s
            return np.concatenate([np.zeros(n_aug), eigs])
    elif criterion == "gcv":
        penalty_eigs = None
    else:
        raise ValueError(f"criterion must be 'gcv' or 'reml', got {criterion!r}")

    ztz = z.T @ z
    zty = z.T @ xi
    xi_sq = (xi**2).sum(axis=0)
    n = z.shape[0]
    if extra_penalty is not None and extra_penalty.shape != ztz.shape:
        raise ValueError(
            f"extra_penalty shape {extra_penalty.shape} does not match {ztz.shape}"
        )

    def evaluate(lam):
        return _lambda_score(ztz, zty, xi_sq, n, lam, (term_x, term_s),
                             criterion, penalty_eigs, extra_penalty)

    candidates = [(lx, ls) for lx in grid for ls in grid]
    best, trace = _argmin_candidates(candidates, evaluate)
    if best[0] is None:
        raise GcvDegenerate("no valid smoothing-parameter candidate on the grid")
    refined = False
    if refine:
        step = np.diff(np.log10(grid)).mean() if grid.size > 1 else 1.0
        fine_x = np.logspace(np.log10(best[0][0]) - step, np.log10(best[0][0]) + step, 5)
        fine_s = np.logspace(np.log10(best[0][1]) - step, np.log10(best[0][1]) + step, 5)
        fine = [(lx, ls) for lx in fine_x for ls in fine_s]
        best_fine, trace_fine = _argmin_candidates(fine, evaluate)
        trace = np.vstack([trace, trace_fine])
        if best_fine[0] is not None and _improves(best_fine[1], best[1]):
            best = best_fine
            refined = True
    return LambdaSelection(lam=best[0], criterion=criterion, score=best[1],
                           trace=trace, refined=refined)


def _embed(core: np.ndarray, n_aug: int) -> np.ndarray:
    if n_aug == 0:
        return core
    full = np.zeros((n_aug + core.shape[0],) * 2)
    full[n_aug:, n_aug:] = core
    return full


def _improves(score: float, incumbent: float) -> bool:
    """Strict improvement beyond a relative tolerance, so that near-ties
    keep the earlier (lexicographically smaller) candidate."""
    if not np.isfinite(score):
        return False
    if not np.isfinite(incumbent):
        return True
    return score < incumbent - 1e-12 * abs(incumbent)


def _argmin_candidates(candidates, evaluate):
    best_lam, best_score = None, np.inf
    rows = []
    for lam in candidates:
        score, edf = evaluate(lam)
        rows.append((lam[0], lam[1], score, edf))
        if _improves(score, best_score) or (best_lam is None and np.isfinite(score)):
            best_lam, best_score = lam, score
    return (best_lam, best_score), np.array(rows)


def _lambda_score(ztz, zty, xi_sq, n, lam, terms, criterion, penalty_eigs,
                  extra_penalty=None):
    penalty = lam[0] * terms[0] + lam[1] * terms[1]
    a_matrix = ztz + penalty
    if extra_penalty is not None:
        a_matrix = a_matrix + extra_penalty
    try:
        factor = cho_factor(a_matrix)
    except LinAlgError:
        return np.inf, np.nan
    theta = cho_solve(factor, zty)
    edf = float(np.trace(cho_solve(factor, ztz)))
    rss = xi_sq - 2.0 * np.einsum("pk,pk->k", theta, zty) + np.einsum(
        "pk,pq,qk->k", theta, ztz, theta
    )
    rss = np.clip(rss, 0.0, None)
    if criterion == "gcv":
        denom = 1.0 - edf / n
        if denom <= 1e-10:
            return np.inf, edf
        return float(rss.sum()) / denom**2, edf
    # REML: profile the per-score error variance
    eigs = penalty_eigs(lam)
    positive = eigs > 1e-12 * max(eigs.max(), np.finfo(float).tiny)
    n_null = int((~positive).sum())
    dof = n - n_null
    if dof <= 0:
        return np.inf, edf
    log_det_pen = float(np.log(eigs[positive]).sum())
    log_det_a = 2.0 * float(np.log(np.diag(factor[0])).sum())
    pen_quad = np.einsum("pk,pq,qk->k", theta, penalty, theta)
    r = np.clip(rss + pen_quad, np.finfo(float).tiny, None)
    ll = (
        -0.5 * dof * (np.log(r) + 1.0 + np.log(2.0 * np.pi) - np.log(dof))
        + 0.5 * log_det_pen
        - 0.5 * log_det_a
    ).sum()
    return -float(ll), edf


# --- fitted model -----------------------------------------------------------


@dataclass
class AffpcFit:
    """Fitted score-space regression plus everything prediction needs."""

    model: str
    eigenbasis: _fpca.EigenBasis
    basis_x: _basis.BSplineBasis | None
    basis_s: _basis.BSplineBasis
    transform: CovariateTransform | None
    theta: np.ndarray
    lam: tuple[float, float]
    n_aug: int
    include_intercept: bool
    scalar_names: tuple[str, ...]
    smooth_covariates: bool
    covariate_domain: tuple[float, float]
    response_domain: tuple[float, float]
    ztz: np.ndarray
    a_matrix: np.ndarray
    score_cov: np.ndarray
    error_cov: _fpca.ErrorCovariance | None
    design: str
    n_subjects: int
    solve_method: str = "cholesky"
    lambda_info: LambdaSelection | None = None
    _solver: SolveResult | None = field(default=None, repr=False)

    @property
    def n_components(self) -> int:
        return self.eigenbasis.n_components

    def h_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._solver is None:
            self._solver = SolveResult(theta=self.theta, a_matrix=self.a_matrix,
                                       ztz=self.ztz, method=self.solve_method)
        return self._solver.h_solve(rhs)

    def design_row(self, curve: CovariateCurve, *, clamp: bool = True,
                   presmoothed: bool = False) -> np.ndarray:
        """Design vector of a new covariate curve, fit preprocessing included.

        ``presmoothed=True`` marks the curve as already carrying the
        per-curve smooth, so the preprocessing step is not reapplied
        (the bootstrap uses this to smooth each new curve once).
        """
        s, x = curve.s_grid, curve.x_values
        if self.smooth_covariates and not presmoothed and x.size >= 4:
            x = smooth_curve(s, x, domain=self.covariate_domain)(s)
        w = trapezoid_rule(s).weights
        bs = self.basis_s.evaluate(s)
        if self.model == "flm":
            block = (w * x) @ bs
        else:
            z = self.transform.apply(s, x, clamp=clamp)
            bx = self.basis_x.evaluate(z)
            block = np.einsum("a,ak,al->kl", w, bx, bs).ravel()
        aug = _aug_row(curve.scalars, self.include_intercept, self.scalar_names)
        return np.concatenate([aug, block]) if aug else block

    def presmooth(self, curve: CovariateCurve) -> CovariateCurve:
        """The curve with the fit's covariate preprocessing applied."""
        if not self.smooth_covariates or curve.x_values.size < 4:
            return curve
        from dataclasses import replace

        smoothed = smooth_curve(curve.s_grid, curve.x_values,
                                domain=self.covariate_domain)(curve.s_grid)
        return replace(curve, x_values=smoothed)

    def predict(self, curve: CovariateCurve, t, *, clamp: bool = True,
                presmoothed: bool = False) -> np.ndarray:
        z0 = self.design_row(curve, clamp=clamp, presmoothed=presmoothed)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        proj = self.theta.T @ z0
        return self.eigenbasis.eval_mean(t) + self.eigenbasis.eval_eigenfunctions(t) @ proj


def predict_curve(fit: AffpcFit, s_grid, x_values, t, *, scalars=None,
                  clamp: bool = True) -> np.ndarray:
    """Predicted response curve for a new covariate curve at times ``t``."""
    curve = CovariateCurve(np.asarray(s_grid, dtype=float),
                           np.asarray(x_values, dtype=float),
                           None if scalars is None else np.asarray(scalars, dtype=float))
    return fit.predict(curve, t, clamp=clamp)


def predict_dataset(fit: AffpcFit, dataset: FunctionalDataset, *, t=None) -> list[np.ndarray]:
    """Predictions for every subject, at its own times or a common ``t``."""
    out = []
    for rec in dataset:
        curve = CovariateCurve(rec.s_grid, rec.x_values, rec.scalar_covariates)
        out.append(fit.predict(curve, rec.t_grid if t is None else t))
    return out


# --- surfaces ---------------------------------------------------------------


def evaluate_surface(fit: AffpcFit, x, s, t, *, clamp: bool = True) -> np.ndarray:
    """Fitted kernel F(x, s, t) at broadcast triples.

    ``x`` is in standardized units for the additive model (one unit is
    one pointwise standard deviation of the covariate); values outside
    the clamp range are clamped with a warning unless ``clamp=False``.
    For the linear model the kernel is x * beta(s, t).
    """
    x, s, t = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(s, dtype=float), np.asarray(t, dtype=float)
    )
    shape = x.shape
    xf, sf, tf = x.ravel(), s.ravel(), t.ravel()
    phi = fit.eigenbasis.eval_eigenfunctions(tf)  # (npts, K)
    theta_f = fit.theta[fit.n_aug :, :]
    bs = fit.basis_s.evaluate(sf)
    if fit.model == "flm":
        vals = np.einsum("al,lk,ak->a", bs, theta_f, phi) * xf
        return vals.reshape(shape)
    xc = xf
    lo, hi = fit.transform.clamp_range
    n_out = int(((xc < lo) | (xc > hi)).sum())
    if n_out:
        if clamp:
            warnings.warn(f"clamped {n_out} surface evaluation points into the "
                          f"standardized range [{lo:.4g}, {hi:.4g}]", stacklevel=2)
            xc = np.clip(xc, lo, hi)
    bx = fit.basis_x.evaluate(xc)  # may raise OutOfDomain when clamp=False
    theta_cube = theta_f.reshape(fit.basis_x.n_basis, fit.basis_s.n_basis, -1)
    vals = np.einsum("aj,al,jlk,ak->a", bx, bs, theta_cube, phi)
    return vals.reshape(shape)


def g_surface(fit: AffpcFit, k: int, x_grid, s_grid, *, clamp: bool = True) -> np.ndarray:
    """Additive component surface G_k on a (x, s) mesh, x standardized."""
    if fit.model != "affpc":
        raise ValueError("component surfaces exist only for the additive model")
    x_grid = np.asarray(x_grid, dtype=float)
    lo, hi = fit.transform.clamp_range
    if clamp:
        x_grid = np.clip(x_grid, lo, hi)
    bx = fit.basis_x.evaluate(x_grid)
    bs = fit.basis_s.evaluate(np.asarray(s_grid, dtype=float))
    theta_k = fit.theta[fit.n_aug :, k].reshape(fit.basis_x.n_basis, fit.basis_s.n_basis)
    return bx @ theta_k @ bs.T


def beta_surface(fit: AffpcFit, s_grid, t_grid) -> np.ndarray:
    """Linear-model coefficient surface beta(s, t) on a mesh."""
    if fit.model != "flm":
        raise ValueError("beta surface exists only for the linear model")
    bs = fit.basis_s.evaluate(np.asarray(s_grid, dtype=float))
    phi = fit.eigenbasis.eval_eigenfunctions(np.asarray(t_grid, dtype=float))
    theta_f = fit.theta[fit.n_aug :, :]
    return bs @ theta_f @ phi.T


# --- top-level fits ----------------------------------------------------------


def _with_smoothed_covariates(dataset: FunctionalDataset) -> FunctionalDataset:
    """Replace covariate values by per-curve penalized-spline smooths."""
    groups: dict[bytes, list] = {}
    for i, rec in enumerate(dataset):
        groups.setdefault(rec.s_grid.tobytes(), []).append(i)
    new_x: list[np.ndarray | None] = [None] * dataset.n_subjects
    for idxs in groups.values():
        s = dataset.subjects[idxs[0]].s_grid
        if s.size < 4:
            for i in idxs:
                new_x[i] = dataset.subjects[i].x_values
            continue
        x_mat = np.column_stack([dataset.subjects[i].x_values for i in idxs])
        bas, coefs, _ = _smooth_matrix(s, x_mat, domain=dataset.covariate_domain,
                                       n_basis=min(25, s.size))
        fitted = bas.evaluate(s) @ coefs
        for j, i in enumerate(idxs):
            new_x[i] = fitted[:, j]
    records = tuple(
        _replace_x(rec, new_x[i]) for i, rec in enumerate(dataset.subjects)
    )
    return FunctionalDataset(records, dataset.covariate_domain,
                             dataset.response_domain, dataset.scalar_names)


def _replace_x(rec, x_values):
    from dataclasses import replace

    return replace(rec, x_values=np.asarray(x_values, dtype=float))


def fit_affpc(dataset: FunctionalDataset, *, kx: int = 7, ks: int = 7,
              degree: int = 3, pve: float = 0.95, lam=None,
              criterion: str = "gcv", lambda_grid=None, grid_size: int = 101,
              design: str = "auto", smooth_covariates: bool = True,
              include_intercept: bool | None = None, use_scalars: bool | None = None,
              n_basis_smooth: int = 25, n_basis_cov: int = 10,
              k_max: int | None = None, fpca: _fpca.FpcaResult | None = None,
              on_singular: str = "raise", error_cov: bool = True) -> AffpcFit:
    """Fit the additive function-on-function model end to end.

    Pipeline: response FPCA (mean, covariance, eigenbasis, scores),
    optional per-curve covariate smoothing, pointwise covariate
    standardization, orthonormal tensor design, penalty selection,
    closed-form solve, and residual error-covariance decomposition.

    ``lam`` fixes (lam_x, lam_s) and skips selection.  ``fpca`` supplies
    a precomputed response decomposition so several models can share it.
    ``use_scalars`` defaults to using scalar covariates when present.
    No intercept column is added by default: the additive kernel already
    spans constant functions, so an explicit intercept duplicates a
    direction of the tensor block that the identifiability deflation
    then has to pin (see :func:`_gauge_penalty`).
    """
    if fpca is None:
        fpca = _fpca.fit_response_fpca(dataset, design=design, pve=pve,
                                       grid_size=grid_size,
                                       n_basis_smooth=n_basis_smooth,
                                       n_basis_cov=n_basis_cov, k_max=k_max)
    if use_scalars is None:
        use_scalars = bool(dataset.scalar_names)
    if include_intercept is None:
        include_intercept = False
    ds_x = _with_smoothed_covariates(dataset) if smooth_covariates else dataset
    transform = fit_transform(ds_x, grid_size=grid_size)
    basis_x = _basis.orthonormalize(_basis.make_basis(transform.clamp_range, kx, degree))
    basis_s = _basis.orthonormalize(_basis.make_basis(dataset.covariate_domain, ks, degree))
    pen_x = _basis.second_derivative_penalty(basis_x)
    pen_s = _basis.second_derivative_penalty(basis_s)
    design_mat = build_design(ds_x, transform, basis_x, basis_s,
                              include_intercept=include_intercept,
                              use_scalars=use_scalars)
    gauge = _gauge_penalty(design_mat, basis_x, basis_s)
    lambda_info = None
    if lam is None:
        lambda_info = select_lambda(design_mat, fpca.scores, pen_x, pen_s,
                                    criterion=criterion, lambda_grid=lambda_grid,
                                    extra_penalty=gauge)
        lam = lambda_info.lam
    penalty = assemble_penalty(pen_x, pen_s, lam, n_augmented=design_mat.n_aug)
    if gauge is not None:
        penalty = penalty + gauge
    sol = solve(design_mat, fpca.scores, penalty, on_singular=on_singular)
    fit = AffpcFit(
        model="affpc", eigenbasis=fpca.eigenbasis, basis_x=basis_x, basis_s=basis_s,
        transform=transform, theta=sol.theta, lam=(float(lam[0]), float(lam[1])),
        n_aug=design_mat.n_aug, include_intercept=include_intercept,
        scalar_names=design_mat.scalar_names, smooth_covariates=smooth_covariates,
        covariate_domain=dataset.covariate_domain, response_domain=dataset.response_domain,
        ztz=sol.ztz, a_matrix=sol.a_matrix, score_cov=fpca.scores.score_cov,
        error_cov=None, design=fpca.design, n_subjects=dataset.n_subjects,
        solve_method=sol.method, lambda_info=lambda_info, _solver=sol,
    )
    if error_cov:
        fit.error_cov = _residual_error_cov(fit, dataset, design_mat, fpca, n_basis_cov)
    return fit


def fit_flm(dataset: FunctionalDataset, *, ks: int = 7, degree: int = 3,
            pve: float = 0.95, lam_s: float | None = None, criterion: str = "gcv",
            lambda_grid=None, grid_size: int = 101, design: str = "auto",
            smooth_covariates: bool = True, include_intercept: bool = True,
            use_scalars: bool | None = None, n_basis_smooth: int = 25,
            n_basis_cov: int = 10, k_max: int | None = None,
            fpca: _fpca.FpcaResult | None = None,
            on_singular: str = "raise", error_cov: bool = True) -> AffpcFit:
    """Fit the linear function-on-function benchmark with the same pipeline.

    The covariate enters untransformed and linearly; only the argument
    direction carries a curvature penalty.
    """
    if fpca is None:
        fpca = _fpca.fit_response_fpca(dataset, design=design, pve=pve,
                                       grid_size=grid_size,
                                       n_basis_smooth=n_basis_smooth,
                                       n_basis_cov=n_basis_cov, k_max=k_max)
    if use_scalars is None:
        use_scalars = bool(dataset.scalar_names)
    ds_x = _with_smoothed_covariates(dataset) if smooth_covariates else dataset
    basis_s = _basis.orthonormalize(_basis.make_basis(dataset.covariate_domain, ks, degree))
    pen_s = _basis.second_derivative_penalty(basis_s)
    design_mat = build_flm_design(ds_x, basis_s, include_intercept=include_intercept,
                                  use_scalars=use_scalars)
    lambda_info = None
    if lam_s is None:
        zero = _basis.PenaltyMatrix(np.zeros((1, 1)))
        lambda_info = select_lambda(design_mat, fpca.scores, zero, pen_s,
                                    criterion=criterion, lambda_grid=lambda_grid)
        lam = (0.0, lambda_info.lam[1])
    else:
        lam = (0.0, float(lam_s))
    penalty = _embed(lam[1] * pen_s.matrix, design_mat.n_aug)
    sol = solve(design_mat, fpca.scores, penalty, on_singular=on_singular)
    fit = AffpcFit(
        model="flm", eigenbasis=fpca.eigenbasis, basis_x=None, basis_s=basis_s,
        transform=None, theta=sol.theta, lam=(0.0, float(lam[1])),
        n_aug=design_mat.n_aug, include_intercept=include_intercept,
        scalar_names=design_mat.scalar_names, smooth_covariates=smooth_covariates,
        covariate_domain=dataset.covariate_domain, response_domain=dataset.response_domain,
        ztz=sol.ztz, a_matrix=sol.a_matrix, score_cov=fpca.scores.score_cov,
        error_cov=None, design=fpca.design, n_subjects=dataset.n_subjects,
        solve_method=sol.method, lambda_info=lambda_info, _solver=sol,
    )
    if error_cov:
        fit.error_cov = _residual_error_cov(fit, dataset, design_mat, fpca, n_basis_cov)
    return fit


def _residual_error_cov(fit: AffpcFit, dataset: FunctionalDataset,
                        design_mat: DesignMatrix, fpca: _fpca.FpcaResult,
                        n_basis_cov: int) -> _fpca.ErrorCovariance:
    """Decompose the covariance of in-sample prediction residuals."""
    eigen = fit.eigenbasis
    proj = design_mat.matrix @ fit.theta  # (n, K) fitted scores
    t_list, e_list = [], []
    for i, rec in enumerate(dataset):
        yhat = eigen.eval_mean(rec.t_grid) + eigen.eval_eigenfunctions(rec.t_grid) @ proj[i]
        t_list.append(rec.t_grid)
        e_list.append(rec.y_values - yhat)
    return _fpca.decompose_error_covariance(t_list, e_list, eigen.grid,
                                            domain=dataset.response_domain,
                                            n_basis_cov=n_basis_cov)
