"""Functional data containers, quadrature, per-curve smoothing, CSV I/O.

The long CSV format has one observation per row with fixed leading
columns ``subject_id, var, arg, value`` where ``var`` is ``X`` (functional
covariate) or ``Y`` (functional response).  Any further columns are
scalar covariates, repeated on every row of a subject.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import basis as _basis
from .errors import (
    DuplicateArgument,
    FormatError,
    GcvDegenerate,
    InvalidGrid,
    InvalidLambda,
    SingularSystem,
    TooFewPoints,
)

__all__ = [
    "QuadratureRule",
    "SubjectRecord",
    "FunctionalDataset",
    "trapezoid_rule",
    "smooth_curve",
    "SmoothedCurve",
    "load_csv",
    "save_csv",
]

# Wide default search grid for per-curve roughness penalties.  The
# endpoints are extreme on purpose: near-interpolation at the low end so
# refitting already-smooth input is a no-op, heavy shrinkage toward the
# penalty null space at the high end.
_LAMBDA_GRID = np.logspace(-10, 7, 35)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a quadrature rule on an interval."""

    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate values sampled at the nodes (first axis)."""
        values = np.asarray(values)
        if values.shape[0] != self.nodes.shape[0]:
            raise InvalidGrid(
                f"values have leading length {values.shape[0]}, "
                f"rule has {self.nodes.shape[0]} nodes"
            )
        return np.tensordot(self.weights, values, axes=(0, 0))


def trapezoid_rule(grid) -> QuadratureRule:
    """Trapezoid quadrature on a strictly increasing grid.

    Exact for functions that are piecewise linear between the nodes.
    """
    grid = np.asarray(grid, dtype=float)
    _require_strictly_increasing(grid, minimum=2)
    weights = np.zeros_like(grid)
    gaps = np.diff(grid)
    weights[:-1] += gaps / 2.0
    weights[1:] += gaps / 2.0
    return QuadratureRule(nodes=grid, weights=weights)


def _require_strictly_increasing(grid: np.ndarray, minimum: int = 2, what: str = "grid"):
    if grid.ndim != 1 or grid.size < minimum:
        raise TooFewPoints(f"{what} needs at least {minimum} points, got {grid.size}")
    if not np.all(np.isfinite(grid)):
        raise InvalidGrid(f"{what} contains non-finite values")
    if np.any(np.diff(grid) <= 0):
        raise InvalidGrid(f"{what} must be strictly increasing")


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: a covariate curve, a response curve, optional scalars."""

    subject_id: str
    s_grid: np.ndarray
    x_values: np.ndarray
    t_grid: np.ndarray
    y_values: np.ndarray
    scalar_covariates: np.ndarray | None = None

    def __post_init__(self):
        for name in ("s_grid", "x_values", "t_grid", "y_values"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.scalar_covariates is not None:
            object.__setattr__(
                self, "scalar_covariates", np.asarray(self.scalar_covariates, dtype=float)
            )
        if self.s_grid.shape != self.x_values.shape:
            raise FormatError(f"subject {self.subject_id}: covariate grid/value length mismatch")
        if self.t_grid.shape != self.y_values.shape:
            raise FormatError(f"subject {self.subject_id}: response grid/value length mismatch")
        _require_strictly_increasing(self.s_grid, minimum=2, what=f"subject {self.subject_id} covariate grid")
        _require_strictly_increasing(self.t_grid, minimum=1, what=f"subject {self.subject_id} response grid")
        if self.t_grid.size > 1 and np.any(np.diff(self.t_grid) <= 0):
            raise InvalidGrid(f"subject {self.subject_id} response grid must be strictly increasing")
        for name in ("x_values", "y_values"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FormatError(f"subject {self.subject_id}: non-finite {name}")

    @property
    def n_scalars(self) -> int:
        return 0 if self.scalar_covariates is None else self.scalar_covariates.size


@dataclass(frozen=True)
class CovariateCurve:
    """A covariate curve without a response, as used for prediction."""

    s_grid: np.ndarray
    x_values: np.ndarray
    scalars: np.ndarray | None = None
    subject_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "s_grid", np.asarray(self.s_grid, dtype=float))
        object.__setattr__(self, "x_values", np.asarray(self.x_values, dtype=float))
        if self.scalars is not None:
            object.__setattr__(self, "scalars", np.asarray(self.scalars, dtype=float))
        if self.s_grid.shape != self.x_values.shape:
            raise FormatError("covariate grid/value length mismatch")
        _require_strictly_increasing(self.s_grid, minimum=2, what="covariate grid")
        if not np.all(np.isfinite(self.x_values)):
            raise FormatError("non-finite covariate values")


def curve_of(rec: SubjectRecord) -> CovariateCurve:
    """The covariate part of a subject record."""
    return CovariateCurve(rec.s_grid, rec.x_values, rec.scalar_covariates, rec.subject_id)


@dataclass(frozen=True)
class FunctionalDataset:
    """A collection of subjects sharing covariate and response domains."""

    subjects: tuple[SubjectRecord, ...]
    covariate_domain: tuple[float, float]
    response_domain: tuple[float, float]
    scalar_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "covariate_domain", _as_domain(self.covariate_domain, "covariate"))
        object.__setattr__(self, "response_domain", _as_domain(self.response_domain, "response"))
        object.__setattr__(self, "scalar_names", tuple(self.scalar_names))
        if not self.subjects:
            raise TooFewPoints("dataset has no subjects")
        for rec in self.subjects:
            lo, hi = self.covariate_domain
            if rec.s_grid[0] < lo - 1e-10 * (hi - lo) or rec.s_grid[-1] > hi + 1e-10 * (hi - lo):
                raise InvalidGrid(f"subject {rec.subject_id}: covariate grid outside domain [{lo}, {hi}]")
            lo, hi = self.response_domain
            if rec.t_grid[0] < lo - 1e-10 * (hi - lo) or rec.t_grid[-1] > hi + 1e-10 * (hi - lo):
                raise InvalidGrid(f"subject {rec.subject_id}: response grid outside domain [{lo}, {hi}]")
            if rec.n_scalars != len(self.scalar_names):
                raise FormatError(
                    f"subject {rec.subject_id}: expected {len(self.scalar_names)} scalar "
                    f"covariates, got {rec.n_scalars}"
                )

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [rec.subject_id for rec in self.subjects]

    def __iter__(self):
        return iter(self.subjects)

    def subset(self, indices) -> "FunctionalDataset":
        """New dataset with the given subjects (repeats allowed)."""
        recs = tuple(self.subjects[i] for i in indices)
        return FunctionalDataset(recs, self.covariate_domain, self.response_domain, self.scalar_names)

    def common_response_grid(self) -> np.ndarray | None:
        """The shared response grid, or None if subjects differ."""
        first = self.subjects[0].t_grid
        for rec in self.subjects[1:]:
            if rec.t_grid.shape != first.shape or not np.array_equal(rec.t_grid, first):
                return None
        return first

    def common_covariate_grid(self) -> np.ndarray | None:
        first = self.subjects[0].s_grid
        for rec in self.subjects[1:]:
            if rec.s_grid.shape != first.shape or not np.array_equal(rec.s_grid, first):
                return None
        return first

    def scalar_matrix(self) -> np.ndarray:
        """Scalar covariates stacked as an (n_subjects, n_scalars) array."""
        if not self.scalar_names:
            return np.zeros((self.n_subjects, 0))
        return np.vstack([rec.scalar_covariates for rec in self.subjects])


def _as_domain(domain, what: str) -> tuple[float, float]:
    lo, hi = float(domain[0]), float(domain[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise InvalidGrid(f"{what} domain must be finite with lower < upper, got ({lo}, {hi})")
    return (lo, hi)


# --- per-curve smoothing -------------------------------------------------


@dataclass(frozen=True)
class SmoothedCurve:
    """Penalized-spline representation of a single curve."""

    basis: _basis.BSplineBasis
    coef: np.ndarray
    lam: float

    def __call__(self, points) -> np.ndarray:
        return self.basis.evaluate(points) @ self.coef


def smooth_curve(grid, values, *, domain=None, n_basis=None, lam=None,
                 lambda_grid=None) -> SmoothedCurve:
    """Penalized cubic-spline smoother for one noisy curve.

    The roughness penalty is the integrated squared second derivative;
    when ``lam`` is None the penalty level is chosen per curve by
    generalized cross-validation over a wide grid.  Because the penalty
    null space contains all affine functions, data lying exactly on a
    line is reproduced exactly at the observed points for any penalty.

    Parameters
    ----------
    grid, values : array_like
        Strictly increasing arguments and observed values (>= 4 points).
    domain : (float, float), optional
        Interval the fitted spline lives on; defaults to the data range.
    n_basis : int, optional
        Number of cubic B-spline functions (default ``min(25, len(grid))``).
    lam : float, optional
        Fixed penalty level; skips the GCV search.
    """
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if grid.size < 4:
        raise TooFewPoints(f"smoothing needs at least 4 points, got {grid.size}")
    _require_strictly_increasing(grid, minimum=4)
    if grid.shape != values.shape:
        raise FormatError("grid and values must have the same length")
    bas, coefs, lams = _smooth_matrix(
        grid, values[:, None], domain=domain, n_basis=n_basis, lam=lam,
        lambda_grid=lambda_grid,
    )
    return SmoothedCurve(basis=bas, coef=coefs[:, 0], lam=float(lams[0]))


def _smooth_matrix(grid, value_matrix, *, domain=None, n_basis=None, lam=None,
                   lambda_grid=None):
    """Smooth many curves sharing one grid; per-column GCV penalty choice.

    ``value_matrix`` is (len(grid), n_curves).  Returns the basis, the
    (n_basis, n_curves) coefficient matrix and the chosen penalty per
    curve.  This is the workhorse for dense designs where all subjects
    share the observation grid: one factorization per candidate penalty
    serves every curve.
    """
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(value_matrix, dtype=float)
    m = grid.size
    if domain is None:
        domain = (grid[0], grid[-1])
    if n_basis is None:
        n_basis = min(25, m)
    n_basis = max(4, int(n_basis))
    bas = _basis.make_basis(domain, n_basis, degree=3)
    penalty = _basis.second_derivative_penalty(bas).matrix
    design = bas.evaluate(grid)
    btb = design.T @ design
    bty = design.T @ values
    if lam is not None:
        lam = float(lam)
        if not (np.isfinite(lam) and lam >= 0):
            raise InvalidLambda(f"penalty level must be finite and >= 0, got {lam}")
        coefs = _solve_psd(btb + lam * penalty, bty)
        return bas, coefs, np.full(values.shape[1], lam)
    grid_lam = _LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    # Make the candidate penalties scale-free: multiply by the ratio of
    # the data and penalty quadratic-form scales.
    scale = (np.trace(btb) / max(np.trace(penalty), np.finfo(float).tiny))
    best_score = np.full(values.shape[1], np.inf)
    best_coef = np.zeros((n_basis, values.shape[1]))
    best_lam = np.zeros(values.shape[1])
    for lam_c in grid_lam * scale:
        try:
            factor = cho_factor(btb + lam_c * penalty)
        except LinAlgError:
            continue
        coef_c = cho_solve(factor, bty)
        edf = np.trace(cho_solve(factor, btb))
        denom = 1.0 - edf / m
        if denom <= 1e-10:
            continue
        rss = ((values - design @ coef_c) ** 2).sum(axis=0)
        score = rss / denom**2
        better = score < best_score
        if np.any(better):
            best_score[better] = score[better]
            best_coef[:, better] = coef_c[:, better]
            best_lam[better] = lam_c
    if not np.all(np.isfinite(best_score)):
        raise GcvDegenerate("no penalty candidate produced a valid GCV score")
    return bas, best_coef, best_lam


def _solve_psd(mat, rhs):
    try:
        return cho_solve(cho_factor(mat), rhs)
    except LinAlgError as exc:
        raise SingularSystem(f"penalized system singular: {exc}") from exc


# --- CSV I/O --------------------------------------------------------------

_FIXED_COLUMNS = ("subject_id", "var", "arg", "value")


def load_csv(path, *, covariate_domain=None, response_domain=None) -> FunctionalDataset:
    """Read a long-format observation file into a dataset.

    Rows with a missing (empty or NaN) ``arg`` or ``value`` are dropped
    and counted in a single warning.  Duplicated (subject, var, arg)
    triples raise :class:`DuplicateArgument`.  Subject order follows
    first appearance in the file.  Domains default to the observed
    ranges of the respective arguments.
    """
    by_subject: dict[str, dict] = {}
    order: list[str] = []
    n_dropped = 0
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:4]) != _FIXED_COLUMNS:
            raise FormatError(
                f"{path}: header must start with {','.join(_FIXED_COLUMNS)}, got {','.join(header[:4])}"
            )
        scalar_names = tuple(header[4:])
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid, var, arg_s, val_s = (cell.strip() for cell in row[:4])
            if var not in ("X", "Y"):
                raise FormatError(f"{path}:{lineno}: var must be 'X' or 'Y', got {var!r}")
            arg = _parse_float(arg_s, path, lineno, "arg", allow_missing=True)
            val = _parse_float(val_s, path, lineno, "value", allow_missing=True)
            if arg is None or val is None:
                n_dropped += 1
                continue
            scalars = tuple(
                _parse_float(cell.strip(), path, lineno, name, allow_missing=False)
                for cell, name in zip(row[4:], scalar_names)
            )
            if sid not in by_subject:
                by_subject[sid] = {"X": {}, "Y": {}, "scalars": scalars}
                order.append(sid)
            entry = by_subject[sid]
            if entry["scalars"] != scalars:
                raise FormatError(
                    f"{path}:{lineno}: subject {sid}: scalar covariates differ between rows"
                )
            if arg in entry[var]:
                raise DuplicateArgument(
                    f"{path}:{lineno}: duplicated ({sid}, {var}, {arg}) observation"
                )
            entry[var][arg] = val
    if n_dropped:
        warnings.warn(f"{path}: dropped {n_dropped} rows with missing arg/value", stacklevel=2)
    if not order:
        raise FormatError(f"{path}: no usable observation rows")
    records = []
    for sid in order:
        entry = by_subject[sid]
        s = np.array(sorted(entry["X"]))
        t = np.array(sorted(entry["Y"]))
        if s.size < 2:
            raise TooFewPoints(f"subject {sid}: needs >= 2 covariate points, got {s.size}")
        if t.size < 1:
            raise TooFewPoints(f"subject {sid}: needs >= 1 response point, got {t.size}")
        records.append(
            SubjectRecord(
                subject_id=sid,
                s_grid=s,
                x_values=np.array([entry["X"][a] for a in s]),
                t_grid=t,
                y_values=np.array([entry["Y"][a] for a in t]),
                scalar_covariates=np.array(entry["scalars"]) if scalar_names else None,
            )
        )
    if covariate_domain is None:
        covariate_domain = (
            min(r.s_grid[0] for r in records),
            max(r.s_grid[-1] for r in records),
        )
    if response_domain is None:
        response_domain = (
            min(r.t_grid[0] for r in records),
            max(r.t_grid[-1] for r in records),
        )
    return FunctionalDataset(
        subjects=tuple(records),
        covariate_domain=covariate_domain,
        response_domain=response_domain,
        scalar_names=scalar_names,
    )


def load_covariate_csv(path) -> tuple[list[CovariateCurve], tuple[str, ...]]:
    """Read covariate curves for prediction from the long format.

    Same layout as :func:`load_csv`, but response rows are optional and
    ignored; each subject only needs covariate observations.
    """
    by_subject: dict[str, dict] = {}
    order: list[str] = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:4]) != _FIXED_COLUMNS:
            raise FormatError(
                f"{path}: header must start with {','.join(_FIXED_COLUMNS)}, got {','.join(header[:4])}"
            )
        scalar_names = tuple(header[4:])
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid, var, arg_s, val_s = (cell.strip() for cell in row[:4])
            if var not in ("X", "Y"):
                raise FormatError(f"{path}:{lineno}: var must be 'X' or 'Y', got {var!r}")
            scalars = tuple(
                _parse_float(cell.strip(), path, lineno, name, allow_missing=False)
                for cell, name in zip(row[4:], scalar_names)
            )
            if sid not in by_subject:
                by_subject[sid] = {"X": {}, "scalars": scalars}
                order.append(sid)
            if by_subject[sid]["scalars"] != scalars:
                raise FormatError(
                    f"{path}:{lineno}: subject {sid}: scalar covariates differ between rows"
                )
            if var != "X":
                continue
            arg = _parse_float(arg_s, path, lineno, "arg", allow_missing=True)
            val = _parse_float(val_s, path, lineno, "value", allow_missing=True)
            if arg is None or val is None:
                continue
            if arg in by_subject[sid]["X"]:
                raise DuplicateArgument(
                    f"{path}:{lineno}: duplicated ({sid}, X, {arg}) observation"
                )
            by_subject[sid]["X"][arg] = val
    if not order:
        raise FormatError(f"{path}: no usable observation rows")
    curves = []
    for sid in order:
        entry = by_subject[sid]
        s = np.array(sorted(entry["X"]))
        if s.size < 2:
            raise TooFewPoints(f"subject {sid}: needs >= 2 covariate points, got {s.size}")
        curves.append(
            CovariateCurve(
                s_grid=s,
                x_values=np.array([entry["X"][a] for a in s]),
                scalars=np.array(entry["scalars"]) if scalar_names else None,
                subject_id=sid,
            )
        )
    return curves, scalar_names


def _parse_float(cell: str, path, lineno: int, column: str, *, allow_missing: bool):
    if cell == "" or cell.lower() == "nan":
        if allow_missing:
            return None
        raise FormatError(f"{path}:{lineno}: missing value in column {column!r}")
    try:
        value = float(cell)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: cannot parse {column}={cell!r} as a number") from None
    if math.isnan(value):
        if allow_missing:
            return None
        raise FormatError(f"{path}:{lineno}: missing value in column {column!r}")
    return value


def save_csv(dataset: FunctionalDataset, path) -> None:
    """Write a dataset in the long format read by :func:`load_csv`.

    Floats are written with ``repr`` so a round trip reproduces every
    field bit-for-bit.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(_FIXED_COLUMNS) + list(dataset.scalar_names))
        for rec in dataset:
            scalars = [repr(float(v)) for v in (rec.scalar_covariates if rec.n_scalars else ())]
            for var, grid, values in (("X", rec.s_grid, rec.x_values), ("Y", rec.t_grid, rec.y_values)):
                for a, v in zip(grid, values):
                    writer.writerow([rec.subject_id, var, repr(float(a)), repr(float(v))] + scalars)
