"""Functional data containers, quadrature, smoothing, and CSV I/O."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from affpc.errors import (
    DuplicateArgument,
    FormatError,
    GcvDegenerate,
    InvalidGrid,
    TooFewPoints,
)
from affpc.funcdata import (
    CovariateCurve,
    FunctionalDataset,
    SubjectRecord,
    curve_of,
    load_covariate_csv,
    load_csv,
    save_csv,
    smooth_curve,
    trapezoid_rule,
)


class TestTrapezoidRule:
    def test_exact_for_piecewise_linear(self):
        grid = np.array([0.0, 0.3, 0.55, 1.0])
        rule = trapezoid_rule(grid)
        values = 2.0 * grid + 1.0
        assert_allclose(rule.integrate(values), np.trapezoid(values, grid), atol=1e-14)
        assert_allclose(rule.integrate(values), 2.0 * 0.5 + 1.0, atol=1e-14)

    def test_weights_sum_to_length(self):
        grid = np.linspace(0.0, 2.5, 17)
        assert_allclose(trapezoid_rule(grid).weights.sum(), 2.5, atol=1e-14)

    def test_matrix_integration(self):
        grid = np.linspace(0.0, 1.0, 21)
        rule = trapezoid_rule(grid)
        values = np.column_stack([grid, grid**2])
        out = rule.integrate(values)
        assert out.shape == (2,)
        assert_allclose(out[0], 0.5, atol=1e-12)

    def test_rejects_decreasing_grid(self):
        with pytest.raises(InvalidGrid):
            trapezoid_rule(np.array([0.0, 0.5, 0.4]))

    @given(st.integers(min_value=2, max_value=40), st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=25, deadline=None)
    def test_linearity_property(self, n, a, b):
        rng = np.random.default_rng(n)
        grid = np.sort(rng.uniform(0.0, 1.0, n))
        if np.any(np.diff(grid) <= 0):
            return
        rule = trapezoid_rule(grid)
        f = rng.normal(size=n)
        g = rng.normal(size=n)
        assert_allclose(rule.integrate(a * f + b * g),
                        a * rule.integrate(f) + b * rule.integrate(g), atol=1e-9)


class TestSubjectRecord:
    def test_grids_must_increase(self):
        with pytest.raises(InvalidGrid):
            SubjectRecord("a", [0.0, 0.0, 1.0], [1.0, 2.0, 3.0], [0.5], [1.0])

    def test_length_mismatch(self):
        with pytest.raises(FormatError):
            SubjectRecord("a", [0.0, 1.0], [1.0], [0.5], [1.0])

    def test_non_finite_rejected(self):
        with pytest.raises(FormatError):
            SubjectRecord("a", [0.0, 1.0], [1.0, np.nan], [0.5], [1.0])

    def test_single_response_point_allowed(self):
        rec = SubjectRecord("a", [0.0, 1.0], [1.0, 2.0], [0.5], [1.0])
        assert rec.t_grid.size == 1


class TestFunctionalDataset:
    def test_subset_with_repeats(self, dense_dataset):
        sub = dense_dataset.subset([0, 0, 3])
        assert sub.n_subjects == 3
        assert sub.ids == ["d0", "d0", "d3"]

    def test_common_grids_detected(self, dense_dataset, sparse_dataset):
        assert dense_dataset.common_response_grid() is not None
        assert dense_dataset.common_covariate_grid() is not None
        assert sparse_dataset.common_response_grid() is None
        assert sparse_dataset.common_covariate_grid() is None

    def test_domain_containment_enforced(self):
        rec = SubjectRecord("a", [0.0, 2.0], [1.0, 2.0], [0.5], [1.0])
        with pytest.raises(InvalidGrid):
            FunctionalDataset((rec,), (0.0, 1.0), (0.0, 1.0))

    def test_scalar_count_enforced(self):
        rec = SubjectRecord("a", [0.0, 1.0], [1.0, 2.0], [0.5], [1.0])
        with pytest.raises(FormatError):
            FunctionalDataset((rec,), (0.0, 1.0), (0.0, 1.0), scalar_names=("z",))

    def test_curve_of_strips_response(self, scalar_dataset):
        curve = curve_of(scalar_dataset.subjects[0])
        assert isinstance(curve, CovariateCurve)
        assert_allclose(curve.x_values, scalar_dataset.subjects[0].x_values)
        assert curve.scalars is not None


class TestSmoothCurve:
    def test_recovers_smooth_signal(self):
        rng = np.random.default_rng(5)
        grid = np.linspace(0.0, 1.0, 60)
        truth = np.sin(2 * np.pi * grid)
        noisy = truth + rng.normal(0.0, 0.05, grid.size)
        fitted = smooth_curve(grid, noisy)(grid)
        rmse = np.sqrt(np.mean((fitted - truth) ** 2))
        assert rmse < 0.05

    def test_interpolates_affine_data_exactly(self):
        grid = np.linspace(0.0, 1.0, 25)
        values = 3.0 - 2.0 * grid
        fitted = smooth_curve(grid, values)(grid)
        assert_allclose(fitted, values, atol=1e-8)

    def test_large_penalty_flattens_toward_line(self):
        rng = np.random.default_rng(0)
        grid = np.linspace(0.0, 1.0, 50)
        values = np.sin(6 * np.pi * grid) + rng.normal(0.0, 0.1, 50)
        heavy = smooth_curve(grid, values, lam=1e9)(grid)
        # a huge curvature penalty leaves only the affine part
        d2 = np.diff(heavy, 2)
        assert np.abs(d2).max() < 1e-4

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            smooth_curve([0.0, 0.5, 1.0], [1.0, 2.0, 3.0])

    def test_evaluation_off_grid(self):
        grid = np.linspace(0.0, 1.0, 30)
        curve = smooth_curve(grid, grid**2)
        mid = curve(np.array([0.51]))
        assert abs(mid[0] - 0.51**2) < 1e-3


class TestCsvRoundTrip:
    def test_bit_exact_round_trip(self, tmp_path, scalar_dataset):
        path = tmp_path / "data.csv"
        save_csv(scalar_dataset, path)
        back = load_csv(path, covariate_domain=(0.0, 1.0), response_domain=(0.0, 1.0))
        assert back.n_subjects == scalar_dataset.n_subjects
        assert back.scalar_names == scalar_dataset.scalar_names
        for a, b in zip(scalar_dataset, back):
            assert a.subject_id == b.subject_id
            assert np.array_equal(a.s_grid, b.s_grid)
            assert np.array_equal(a.x_values, b.x_values)
            assert np.array_equal(a.t_grid, b.t_grid)
            assert np.array_equal(a.y_values, b.y_values)
            assert np.array_equal(a.scalar_covariates, b.scalar_covariates)

    def test_subject_order_follows_first_appearance(self, tmp_path):
        path = tmp_path / "o.csv"
        path.write_text(
            "subject_id,var,arg,value\n"
            "b,X,0.0,1.0\nb,X,1.0,2.0\nb,Y,0.2,3.0\nb,Y,0.8,1.0\n"
            "a,X,0.0,1.0\na,X,1.0,2.0\na,Y,0.2,3.0\na,Y,0.8,1.0\n"
        )
        assert load_csv(path).ids == ["b", "a"]

    def test_missing_values_dropped_with_warning(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "subject_id,var,arg,value\n"
            "a,X,0.0,1.0\na,X,1.0,2.0\na,X,0.5,\na,Y,0.2,3.0\na,Y,0.8,1.0\n"
        )
        with pytest.warns(UserWarning, match="dropped"):
            ds = load_csv(path)
        assert ds.subjects[0].s_grid.size == 2

    def test_duplicate_argument_raises(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text(
            "subject_id,var,arg,value\n"
            "a,X,0.0,1.0\na,X,0.0,2.0\na,Y,0.5,3.0\n"
        )
        with pytest.raises(DuplicateArgument):
            load_csv(path)

    def test_bad_header_raises(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("id,var,arg,value\na,X,0.0,1.0\n")
        with pytest.raises(FormatError):
            load_csv(path)

    def test_inconsistent_scalars_raise(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text(
            "subject_id,var,arg,value,z\n"
            "a,X,0.0,1.0,5.0\na,X,1.0,2.0,6.0\na,Y,0.5,3.0,5.0\n"
        )
        with pytest.raises(FormatError):
            load_csv(path)


class TestCovariateCsv:
    def test_loads_covariate_only_file(self, tmp_path):
        path = tmp_path / "new.csv"
        path.write_text(
            "subject_id,var,arg,value\n"
            "p1,X,0.0,1.5\np1,X,0.5,2.0\np1,X,1.0,0.5\n"
        )
        curves, names = load_covariate_csv(path)
        assert len(curves) == 1
        assert names == ()
        assert_allclose(curves[0].x_values, [1.5, 2.0, 0.5])

    def test_response_rows_ignored(self, tmp_path):
        path = tmp_path / "mix.csv"
        path.write_text(
            "subject_id,var,arg,value\n"
            "p1,X,0.0,1.5\np1,X,1.0,0.5\np1,Y,0.5,9.0\n"
        )
        curves, _ = load_covariate_csv(path)
        assert curves[0].s_grid.size == 2

    def test_requires_two_covariate_points(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("subject_id,var,arg,value\np1,X,0.0,1.5\n")
        with pytest.raises(TooFewPoints):
            load_covariate_csv(path)


class TestGcvDegenerate:
    def test_saturated_smoother_reports_degeneracy(self):
        # four points and a basis large enough to interpolate: every
        # candidate keeps edf close to n and GCV has no usable value
        grid = np.array([0.0, 0.4, 0.7, 1.0])
        values = np.array([1.0, -1.0, 1.0, -1.0])
        with pytest.raises(GcvDegenerate):
            smooth_curve(grid, values, n_basis=4, lambda_grid=[1e-300])
