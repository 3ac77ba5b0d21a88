"""Conditional variance, bootstrap machinery, and prediction bands."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from affpc.errors import (
    BootstrapDegenerate,
    ConfigError,
    GridMismatch,
    InvalidScoreCov,
)
from affpc.fpca import EigenBasis
from affpc.funcdata import CovariateCurve, FunctionalDataset, SubjectRecord, curve_of
from affpc.inference import (
    BootstrapConfig,
    bootstrap_variance,
    conditional_variance,
    coverage_evaluate,
    prediction_band,
    prediction_bands,
)
from affpc.model import AffpcFit, fit_affpc
from tests.conftest import make_dense_dataset

Z_975 = 1.959963984540054  # standard normal 0.975 quantile


def _synthetic_fit(seed=0, n=30, p=6, k=2, lam=0.7):
    """Hand-built fit with a fixed design, penalty, and score covariance."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, p))
    pen = lam * np.eye(p)
    ztz = z.T @ z
    a = ztz + pen
    grid = np.linspace(0.0, 1.0, 41)
    phi = np.column_stack([
        np.sqrt(2.0) * np.sin(2 * np.pi * grid),
        np.sqrt(2.0) * np.cos(2 * np.pi * grid),
    ])[:, :k]
    nu = np.diag(rng.uniform(0.5, 2.0, k))
    eigen = EigenBasis(grid=grid, mean=np.zeros(grid.size), eigenfunctions=phi,
                       eigenvalues=np.diag(nu).copy(), pve=1.0,
                       total_variance=float(np.diag(nu).sum()))
    fit = AffpcFit(
        model="affpc", eigenbasis=eigen, basis_x=None, basis_s=None,
        transform=None, theta=np.zeros((p, k)), lam=(lam, lam), n_aug=0,
        include_intercept=False, scalar_names=(), smooth_covariates=False,
        covariate_domain=(0.0, 1.0), response_domain=(0.0, 1.0),
        ztz=ztz, a_matrix=a, score_cov=nu, error_cov=None, design="dense",
        n_subjects=n,
    )
    return fit, z, pen, nu


class TestConditionalVariance:
    def test_matches_score_resampling(self):
        # resample scores with the declared covariance, refit in closed
        # form, and compare the predictor variance to the formula
        fit, z, pen, nu = _synthetic_fit(seed=1)
        rng = np.random.default_rng(10)
        z0 = rng.normal(size=z.shape[1])
        t_grid = np.array([0.1, 0.37, 0.8])
        expected = conditional_variance(fit, z0, t_grid)

        n_draws = 20000
        h_zt = np.linalg.solve(fit.a_matrix, z.T)
        xi = rng.normal(size=(n_draws, z.shape[0], nu.shape[0])) * np.sqrt(np.diag(nu))
        theta_hat = np.einsum("pn,bnk->bpk", h_zt, xi)
        proj = np.einsum("bpk,p->bk", theta_hat, z0)
        phi = fit.eigenbasis.eval_eigenfunctions(t_grid)
        preds = proj @ phi.T
        mc_var = preds.var(axis=0)
        assert_allclose(mc_var, expected, rtol=0.05)

    def test_zero_penalty_dense_formula(self):
        fit, z, _, nu = _synthetic_fit(seed=2, lam=0.0)
        z0 = np.ones(z.shape[1])
        t = np.array([0.25])
        got = conditional_variance(fit, z0, t)
        omega = z0 @ np.linalg.solve(z.T @ z, z0)
        phi = fit.eigenbasis.eval_eigenfunctions(t)[0]
        assert_allclose(got[0], omega * (phi @ nu @ phi), rtol=1e-8)

    def test_asymmetric_score_cov_rejected(self):
        fit, z, _, _ = _synthetic_fit()
        fit.score_cov = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(InvalidScoreCov):
            conditional_variance(fit, np.ones(z.shape[1]), [0.5])

    def test_indefinite_score_cov_rejected(self):
        fit, z, _, _ = _synthetic_fit()
        fit.score_cov = np.array([[1.0, 0.0], [0.0, -0.5]])
        with pytest.raises(InvalidScoreCov):
            conditional_variance(fit, np.ones(z.shape[1]), [0.5])

    def test_nonnegative(self):
        fit, z, _, _ = _synthetic_fit(seed=3)
        rng = np.random.default_rng(4)
        for _ in range(10):
            v = conditional_variance(fit, rng.normal(size=z.shape[1]),
                                     np.linspace(0, 1, 11))
            assert np.all(v >= 0.0)


class TestPredictionBand:
    def test_half_width_formula(self):
        t = np.linspace(0.0, 1.0, 9)
        band = prediction_band(t, np.zeros(9), 0.04, 0.05, 0.16, alpha=0.05)
        se = np.sqrt(0.25)
        assert_allclose(band.se_total, se, atol=1e-14)
        assert_allclose(band.upper - band.lower, 2.0 * Z_975 * se, rtol=1e-12)
        assert_allclose(band.upper + band.lower, 2.0 * band.y_hat, atol=1e-12)

    @given(st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    @settings(max_examples=30, deadline=None)
    def test_width_decreases_in_alpha(self, a1, a2):
        lo, hi = sorted((a1, a2))
        t = np.array([0.0, 1.0])
        wide = prediction_band(t, [0.0, 0.0], 1.0, 0.5, 0.25, alpha=lo)
        narrow = prediction_band(t, [0.0, 0.0], 1.0, 0.5, 0.25, alpha=hi)
        assert np.all(wide.upper - wide.lower >= narrow.upper - narrow.lower)

    def test_negative_variance_clipped_with_warning(self):
        t = np.array([0.0, 0.5, 1.0])
        with pytest.warns(UserWarning, match="clipped"):
            band = prediction_band(t, np.zeros(3), [-0.1, 0.0, 0.1], 0.0, 0.0)
        assert_allclose(band.var_model, [0.0, 0.0, 0.1])

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ConfigError):
            prediction_band([0.0, 1.0], [0.0, 0.0], 0.1, 0.1, 0.1, alpha=alpha)

    def test_shape_mismatch(self):
        with pytest.raises(GridMismatch):
            prediction_band([0.0, 0.5, 1.0], [0.0, 0.0], 0.1, 0.1, 0.1)

    def test_rows_layout(self):
        band = prediction_band([0.0, 1.0], [1.0, 2.0], 0.01, 0.02, 0.03)
        rows = list(band.rows())
        assert len(rows) == 2
        assert rows[1][0] == 1.0 and rows[1][1] == 2.0
        assert len(rows[0]) == 8


def _boot_setup(n=25, n_new=3, seed=7):
    ds = make_dense_dataset(n=n, n_s=21, n_t=25, seed=seed, noise=0.15)
    new = make_dense_dataset(n=n_new, n_s=21, n_t=25, seed=seed + 1, noise=0.15)
    curves = [curve_of(rec) for rec in new]
    truths = [rec.y_values for rec in new]
    kwargs = dict(kx=4, ks=4, grid_size=31, smooth_covariates=False)
    return ds, curves, truths, kwargs


class TestBootstrap:
    def test_seed_reproducibility(self):
        ds, curves, _, kwargs = _boot_setup()
        config = BootstrapConfig(n_boot=5, seed=42, fit_kwargs=kwargs)
        t = np.linspace(0.0, 1.0, 13)
        a = bootstrap_variance(ds, curves, config, t_grid=t)
        b = bootstrap_variance(ds, curves, config, t_grid=t)
        assert np.array_equal(a.y_boot, b.y_boot)
        assert np.array_equal(a.var_model, b.var_model)
        c = bootstrap_variance(ds, curves,
                               BootstrapConfig(n_boot=5, seed=43, fit_kwargs=kwargs),
                               t_grid=t)
        assert not np.array_equal(a.y_boot, c.y_boot)

    def test_worker_count_does_not_change_results(self):
        ds, curves, _, kwargs = _boot_setup()
        t = np.linspace(0.0, 1.0, 9)
        serial = bootstrap_variance(
            ds, curves, BootstrapConfig(n_boot=4, seed=5, workers=1, fit_kwargs=kwargs),
            t_grid=t)
        parallel = bootstrap_variance(
            ds, curves, BootstrapConfig(n_boot=4, seed=5, workers=2, fit_kwargs=kwargs),
            t_grid=t)
        assert np.array_equal(serial.y_boot, parallel.y_boot)

    def test_variance_components_definitions(self):
        ds, curves, _, kwargs = _boot_setup()
        t = np.linspace(0.0, 1.0, 9)
        config = BootstrapConfig(n_boot=6, seed=3, fit_kwargs=kwargs)
        res = bootstrap_variance(ds, curves, config, t_grid=t)
        centered = res.y_boot - res.y_boot.mean(axis=0)
        assert_allclose(res.var_eigen, (centered**2).mean(axis=0), atol=1e-14)
        assert res.y_boot.shape == (6, len(curves), t.size)
        assert res.k_boot.shape == (6,)
        assert np.all(res.k_boot >= 1)
        assert np.all(res.var_model >= 0.0)

    def test_degenerate_resamples_exhaust_redraws(self):
        # a constant covariate makes standardization impossible, so every
        # replicate fit fails and the redraw budget runs out
        t = np.linspace(0.0, 1.0, 9)
        recs = tuple(
            SubjectRecord(f"c{i}", [0.0, 0.5, 1.0], [1.0, 1.0, 1.0], t,
                          np.sin(t) * (i + 1))
            for i in range(6)
        )
        ds = FunctionalDataset(recs, (0.0, 1.0), (0.0, 1.0))
        curve = CovariateCurve(np.array([0.0, 0.5, 1.0]), np.array([1.0, 1.0, 1.0]))
        config = BootstrapConfig(n_boot=1, seed=0, max_redraws=2,
                                 fit_kwargs=dict(kx=4, ks=4, grid_size=11,
                                                 smooth_covariates=False))
        with pytest.raises(BootstrapDegenerate):
            bootstrap_variance(ds, [curve], config, t_grid=t)

    def test_bootstrap_mean_noise_mode(self):
        ds, curves, _, kwargs = _boot_setup()
        t = np.linspace(0.0, 1.0, 9)
        config = BootstrapConfig(n_boot=3, seed=1, error_cov_mode="bootstrap_mean",
                                 fit_kwargs=kwargs)
        res = bootstrap_variance(ds, curves, config, t_grid=t)
        assert res.var_noise is not None
        assert res.var_noise.shape == (t.size,)
        assert np.all(res.var_noise >= 0.0)


class TestPredictionBands:
    def test_end_to_end(self):
        ds, curves, truths, kwargs = _boot_setup()
        config = BootstrapConfig(n_boot=5, seed=11, fit_kwargs=kwargs)
        base, boot, bands = prediction_bands(ds, curves, config=config,
                                             alphas=(0.05, 0.10))
        assert set(bands) == {0.05, 0.10}
        assert len(bands[0.05]) == len(curves)
        t_grid = base.eigenbasis.grid
        for i, band in enumerate(bands[0.05]):
            assert_allclose(band.y_hat, base.predict(curves[i], t_grid), atol=1e-12)
            assert np.all(band.upper >= band.lower)
        for lo, hi in zip(bands[0.10], bands[0.05]):
            assert np.all(hi.upper - hi.lower >= lo.upper - lo.lower)

    def test_base_fit_passthrough(self):
        ds, curves, _, kwargs = _boot_setup()
        base = fit_affpc(ds, **kwargs)
        config = BootstrapConfig(n_boot=3, seed=2, fit_kwargs=kwargs)
        same_base, _, _ = prediction_bands(ds, curves, config=config, base_fit=base)
        assert same_base is base


class TestCoverageEvaluate:
    @staticmethod
    def _flat_band(level):
        t = np.linspace(0.0, 1.0, 5)
        return prediction_band(t, np.zeros(5), level**2, 0.0, 0.0, alpha=0.05)

    def test_exact_fraction(self):
        band = self._flat_band(1.0 / Z_975)  # half width exactly 1
        truths = [np.array([0.0, 0.5, 0.9999, 1.5, -2.0])]
        report = coverage_evaluate([band], truths)
        assert_allclose(report.coverage, 3.0 / 5.0)
        assert report.n_curves == 1 and report.n_points == 5
        assert_allclose(report.per_t, [1.0, 1.0, 1.0, 0.0, 0.0])

    def test_multiple_curves_average(self):
        band = self._flat_band(1.0 / Z_975)
        inside = np.zeros(5)
        outside = np.full(5, 10.0)
        report = coverage_evaluate([band, band], [inside, outside])
        assert_allclose(report.coverage, 0.5)
        assert_allclose(report.per_t, np.full(5, 0.5))

    def test_count_mismatch(self):
        band = self._flat_band(1.0)
        with pytest.raises(GridMismatch):
            coverage_evaluate([band], [np.zeros(5), np.zeros(5)])

    def test_truth_shape_mismatch(self):
        band = self._flat_band(1.0)
        with pytest.raises(GridMismatch):
            coverage_evaluate([band], [np.zeros(4)])

    def test_empty_rejected(self):
        with pytest.raises(GridMismatch):
            coverage_evaluate([], [])
