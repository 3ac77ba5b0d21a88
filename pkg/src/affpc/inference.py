"""Pointwise prediction bands for predicted response curves.

The band variance has three parts: parameter uncertainty propagated
through the penalized solve (the sandwich form evaluated at the new
subject's design vector), eigenspace/resampling uncertainty estimated by
a nonparametric bootstrap over subjects that re-runs the entire fitting
pipeline, and the residual-process variance along the response argument.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .errors import (
    BootstrapDegenerate,
    ConfigError,
    GridMismatch,
    InvalidScoreCov,
    NumericalError,
)
from .funcdata import CovariateCurve, FunctionalDataset, curve_of, smooth_curve
from .model import AffpcFit, fit_affpc, fit_flm

__all__ = [
    "BootstrapConfig",
    "BootstrapResult",
    "PredictionBand",
    "CoverageReport",
    "conditional_variance",
    "bootstrap_variance",
    "prediction_band",
    "prediction_bands",
    "coverage_evaluate",
]


def conditional_variance(fit: AffpcFit, z0: np.ndarray, t_grid) -> np.ndarray:
    """Model-based variance of the predicted curve at a fixed design vector.

    Treating the estimated scores as working responses with covariance
    ``score_cov``, the predictor variance at time t is

        z0' H (Z'Z) H' z0  *  phi(t)' score_cov phi(t),

    with ``H = (Z'Z + P)^(-1)`` from the penalized solve.
    """
    z0 = np.asarray(z0, dtype=float)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    nu = np.asarray(fit.score_cov, dtype=float)
    if nu.ndim != 2 or nu.shape[0] != nu.shape[1] or not np.allclose(nu, nu.T, atol=1e-10):
        raise InvalidScoreCov("score covariance must be square and symmetric")
    eigs = np.linalg.eigvalsh((nu + nu.T) / 2.0)
    if eigs[0] < -1e-8 * max(eigs[-1], 1.0):
        raise InvalidScoreCov(f"score covariance has negative eigenvalue {eigs[0]:.3g}")
    u = fit.h_solve(z0)
    omega0 = float(u @ fit.ztz @ u)
    phi = fit.eigenbasis.eval_eigenfunctions(t_grid)
    quad = np.einsum("tk,kl,tl->t", phi, nu, phi)
    return np.clip(omega0 * quad, 0.0, None)


@dataclass(frozen=True)
class BootstrapConfig:
    """Settings for the subject-resampling bootstrap.

    ``fit_kwargs`` are forwarded to :func:`fit_affpc` (or
    :func:`fit_flm` when ``model='flm'``) for every replicate, so each
    replicate re-selects the truncation level and the penalty levels.
    ``error_cov_mode='bootstrap_mean'`` additionally averages the
    replicate residual variances for the noise part of the band.
    """

    n_boot: int = 100
    seed: object = 0
    workers: int = 1
    max_redraws: int = 10
    model: str = "affpc"
    error_cov_mode: str = "single"
    fit_kwargs: dict = field(default_factory=dict)


@dataclass
class BootstrapResult:
    """Per-curve variance components accumulated over replicates."""

    t_grid: np.ndarray
    var_model: np.ndarray  # (n_curves, T) mean of replicate conditional variances
    var_eigen: np.ndarray  # (n_curves, T) spread of replicate predictions
    y_boot: np.ndarray  # (B, n_curves, T)
    k_boot: np.ndarray  # (B,) truncation level per replicate
    n_redraws: int
    var_noise: np.ndarray | None = None  # (T,) only for error_cov_mode='bootstrap_mean'


def _fit_for(config: BootstrapConfig, dataset: FunctionalDataset) -> AffpcFit:
    if config.model == "flm":
        return fit_flm(dataset, **config.fit_kwargs)
    return fit_affpc(dataset, **config.fit_kwargs)


def _one_replicate(args):
    """One bootstrap replicate: resample subjects, refit, predict.

    Degenerate resamples (numerically singular fits) are redrawn from
    the same stream up to ``max_redraws`` times.  The curves arrive
    already preprocessed, so only the refit-dependent steps run here.
    """
    child, dataset, curves, config, t_grid = args
    rng = np.random.default_rng(child)
    n = dataset.n_subjects
    n_redraws = 0
    last_error = None
    keep_noise = config.error_cov_mode == "bootstrap_mean"
    fit_kwargs = dict(config.fit_kwargs)
    fit_kwargs.setdefault("error_cov", keep_noise)
    replicate_config = replace(config, fit_kwargs=fit_kwargs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(config.max_redraws + 1):
            idx = rng.integers(0, n, size=n)
            try:
                fit = _fit_for(replicate_config, dataset.subset(idx))
                break
            except NumericalError as exc:
                n_redraws += 1
                last_error = exc
        else:
            raise BootstrapDegenerate(
                f"bootstrap replicate still degenerate after {config.max_redraws} "
                f"redraws (last error: {last_error})"
            )
        y_rows = np.empty((len(curves), t_grid.size))
        v_rows = np.empty((len(curves), t_grid.size))
        mean_t = fit.eigenbasis.eval_mean(t_grid)
        phi_t = fit.eigenbasis.eval_eigenfunctions(t_grid)
        for j, curve in enumerate(curves):
            z0 = fit.design_row(curve, presmoothed=True)
            y_rows[j] = mean_t + phi_t @ (fit.theta.T @ z0)
            v_rows[j] = conditional_variance(fit, z0, t_grid)
    noise = fit.error_cov.variance_at(t_grid) if keep_noise else None
    return y_rows, v_rows, int(fit.n_components), n_redraws, noise


def bootstrap_variance(dataset: FunctionalDataset, curves, config: BootstrapConfig, *,
                       t_grid=None, base_fit: AffpcFit | None = None) -> BootstrapResult:
    """Bootstrap the fitting pipeline over subjects drawn with replacement.

    Every replicate re-runs response FPCA (the truncation level may
    change), covariate standardization, penalty selection, and the
    solve, then predicts each new curve.  ``var_model`` averages the
    replicate conditional variances; ``var_eigen`` is the centered
    second moment of the replicate predictions (divisor ``n_boot``).
    Replicate substreams are spawned from one seed sequence, so results
    do not depend on the worker count.
    """
    curves = [c if isinstance(c, CovariateCurve) else curve_of(c) for c in curves]
    if t_grid is None:
        if base_fit is None:
            raise ValueError("t_grid or base_fit is required")
        t_grid = base_fit.eigenbasis.grid
    t_grid = np.asarray(t_grid, dtype=float)
    if config.fit_kwargs.get("smooth_covariates", True):
        # per-curve smoothing does not depend on the resample, so do it once
        curves = [
            replace(c, x_values=smooth_curve(c.s_grid, c.x_values,
                                             domain=dataset.covariate_domain)(c.s_grid))
            if c.x_values.size >= 4 else c
            for c in curves
        ]
    seed = config.seed
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(config.n_boot)
    tasks = [(child, dataset, curves, config, t_grid) for child in children]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_one_replicate, tasks, chunksize=4))
    else:
        results = [_one_replicate(task) for task in tasks]
    y_boot = np.stack([r[0] for r in results])
    v_boot = np.stack([r[1] for r in results])
    k_boot = np.array([r[2] for r in results])
    n_redraws = int(sum(r[3] for r in results))
    var_model = v_boot.mean(axis=0)
    centered = y_boot - y_boot.mean(axis=0)
    var_eigen = (centered**2).mean(axis=0)
    var_noise = None
    if config.error_cov_mode == "bootstrap_mean":
        var_noise = np.stack([r[4] for r in results]).mean(axis=0)
    return BootstrapResult(t_grid=t_grid, var_model=var_model, var_eigen=var_eigen,
                           y_boot=y_boot, k_boot=k_boot, n_redraws=n_redraws,
                           var_noise=var_noise)


@dataclass(frozen=True)
class PredictionBand:
    """Pointwise normal band around a predicted curve."""

    t_grid: np.ndarray
    y_hat: np.ndarray
    se_total: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    var_model: np.ndarray
    var_eigen: np.ndarray
    var_noise: np.ndarray
    alpha: float

    def rows(self):
        """Row tuples matching the band CSV column layout."""
        for j in range(self.t_grid.size):
            yield (self.t_grid[j], self.y_hat[j], self.se_total[j], self.lower[j],
                   self.upper[j], self.var_model[j], self.var_eigen[j], self.var_noise[j])


def prediction_band(t_grid, y_hat, var_model, var_eigen, var_noise,
                    alpha: float = 0.05) -> PredictionBand:
    """Combine the three variance parts into a pointwise normal band.

    The half width is ``z_{alpha/2} * sqrt(var_model + var_eigen +
    var_noise)``.  Negative variance inputs are clipped to zero with a
    warning.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be strictly between 0 and 1, got {alpha}")
    t_grid = np.asarray(t_grid, dtype=float)
    parts = []
    for name, part in (("y_hat", y_hat), ("var_model", var_model),
                       ("var_eigen", var_eigen), ("var_noise", var_noise)):
        part = np.asarray(part, dtype=float)
        try:
            part = np.broadcast_to(part, t_grid.shape).copy()
        except ValueError:
            raise GridMismatch(
                f"{name} shape {part.shape} does not match t grid {t_grid.shape}"
            ) from None
        if name != "y_hat" and np.any(part < 0):
            warnings.warn(f"negative {name} values clipped to zero", stacklevel=2)
            part = np.clip(part, 0.0, None)
        parts.append(part)
    y_hat, var_model, var_eigen, var_noise = parts
    se_total = np.sqrt(var_model + var_eigen + var_noise)
    z = norm.ppf(1.0 - alpha / 2.0)
    return PredictionBand(t_grid=t_grid, y_hat=y_hat, se_total=se_total,
                          lower=y_hat - z * se_total, upper=y_hat + z * se_total,
                          var_model=var_model, var_eigen=var_eigen,
                          var_noise=var_noise, alpha=alpha)


def prediction_bands(dataset: FunctionalDataset, curves, *,
                     config: BootstrapConfig | None = None,
                     base_fit: AffpcFit | None = None,
                     alphas=(0.05,), t_grid=None):
    """End-to-end band construction for a list of new covariate curves.

    Fits the model on ``dataset`` (unless ``base_fit`` is given), runs
    the bootstrap, and assembles one band per curve and level.  The
    point prediction comes from the base fit; the noise variance comes
    from its residual decomposition unless the config requests the
    bootstrap average.  Returns ``(base_fit, bootstrap_result, bands)``
    with ``bands[alpha][i]`` the band for curve i.
    """
    config = config or BootstrapConfig()
    if base_fit is None:
        base_fit = _fit_for(config, dataset)
    if t_grid is None:
        t_grid = base_fit.eigenbasis.grid
    t_grid = np.asarray(t_grid, dtype=float)
    curves = [c if isinstance(c, CovariateCurve) else curve_of(c) for c in curves]
    boot = bootstrap_variance(dataset, curves, config, t_grid=t_grid)
    if boot.var_noise is not None:
        var_noise = boot.var_noise
    else:
        var_noise = base_fit.error_cov.variance_at(t_grid)
    bands: dict[float, list[PredictionBand]] = {}
    for alpha in alphas:
        bands[float(alpha)] = []
        for i, curve in enumerate(curves):
            y0 = base_fit.predict(curve, t_grid)
            bands[float(alpha)].append(
                prediction_band(t_grid, y0, boot.var_model[i], boot.var_eigen[i],
                                var_noise, alpha=float(alpha))
            )
    return base_fit, boot, bands


@dataclass(frozen=True)
class CoverageReport:
    """Empirical pointwise coverage of a set of bands against truth."""

    coverage: float
    per_t: np.ndarray | None
    n_curves: int
    n_points: int
    alpha: float


def coverage_evaluate(bands, truths) -> CoverageReport:
    """Fraction of true values inside their pointwise band.

    ``truths[i]`` holds the true curve values on ``bands[i].t_grid``.
    The overall rate averages the inclusion indicator over all (curve,
    time) pairs; the per-time profile is reported when all bands share
    one grid.
    """
    if len(bands) != len(truths):
        raise GridMismatch(f"{len(bands)} bands but {len(truths)} truth curves")
    if not bands:
        raise GridMismatch("no bands to evaluate")
    hits = []
    common_grid = bands[0].t_grid
    shared = True
    for band, truth in zip(bands, truths):
        truth = np.asarray(truth, dtype=float)
        if truth.shape != band.t_grid.shape:
            raise GridMismatch(
                f"truth shape {truth.shape} does not match band grid {band.t_grid.shape}"
            )
        hits.append((band.lower <= truth) & (truth <= band.upper))
        if band.t_grid.shape != common_grid.shape or not np.array_equal(band.t_grid, common_grid):
            shared = False
    coverage = float(np.mean([h.mean() for h in hits]))
    per_t = np.mean(np.vstack(hits), axis=0) if shared else None
    n_points = int(sum(h.size for h in hits))
    return CoverageReport(coverage=coverage, per_t=per_t, n_curves=len(bands),
                          n_points=n_points, alpha=bands[0].alpha)
