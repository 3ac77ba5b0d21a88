"""Versioned JSON persistence for fitted models.

A saved file carries a schema version; loading a file written under a
different schema, or missing required fields, raises
:class:`ModelCompatError` rather than guessing.  Arrays round-trip
exactly because floats are serialized with full repr precision.
"""
from __future__ import annotations

import json

import numpy as np

from .basis import BSplineBasis
from .errors import ModelCompatError
from .fpca import EigenBasis, ErrorCovariance
from .model import AffpcFit, CovariateTransform

__all__ = [
    "SCHEMA_VERSION",
    "save_fit",
    "load_fit",
    "fit_to_dict",
    "fit_from_dict",
    "eigenbasis_to_dict",
    "eigenbasis_from_dict",
]

SCHEMA_VERSION = 1


def _arr(values):
    return np.asarray(values, dtype=float)


def _basis_to_dict(basis: BSplineBasis | None):
    if basis is None:
        return None
    return {
        "domain": list(basis.domain),
        "degree": basis.degree,
        "n_basis": basis.n_basis,
        "knots": basis.knots.tolist(),
        "orthonormalized": basis.orthonormalized,
        "transform_matrix": None if basis.transform_matrix is None
        else basis.transform_matrix.tolist(),
    }


def _basis_from_dict(data):
    if data is None:
        return None
    return BSplineBasis(
        domain=(float(data["domain"][0]), float(data["domain"][1])),
        degree=int(data["degree"]),
        n_basis=int(data["n_basis"]),
        knots=_arr(data["knots"]),
        orthonormalized=bool(data["orthonormalized"]),
        transform_matrix=None if data["transform_matrix"] is None
        else _arr(data["transform_matrix"]),
    )


def eigenbasis_to_dict(eigen: EigenBasis) -> dict:
    return {
        "grid": eigen.grid.tolist(),
        "mean": eigen.mean.tolist(),
        "eigenfunctions": eigen.eigenfunctions.tolist(),
        "eigenvalues": eigen.eigenvalues.tolist(),
        "pve": eigen.pve,
        "total_variance": eigen.total_variance,
        "nugget": eigen.nugget,
    }


def eigenbasis_from_dict(data: dict) -> EigenBasis:
    return EigenBasis(
        grid=_arr(data["grid"]),
        mean=_arr(data["mean"]),
        eigenfunctions=_arr(data["eigenfunctions"]),
        eigenvalues=_arr(data["eigenvalues"]),
        pve=float(data["pve"]),
        total_variance=float(data["total_variance"]),
        nugget=float(data["nugget"]),
    )


def _transform_to_dict(transform: CovariateTransform | None):
    if transform is None:
        return None
    return {
        "grid": transform.grid.tolist(),
        "mean": transform.mean.tolist(),
        "sd": transform.sd.tolist(),
        "clamp_range": list(transform.clamp_range),
    }


def _transform_from_dict(data):
    if data is None:
        return None
    return CovariateTransform(
        grid=_arr(data["grid"]),
        mean=_arr(data["mean"]),
        sd=_arr(data["sd"]),
        clamp_range=(float(data["clamp_range"][0]), float(data["clamp_range"][1])),
    )


def _error_cov_to_dict(error_cov: ErrorCovariance | None):
    if error_cov is None:
        return None
    return {
        "grid": error_cov.grid.tolist(),
        "eigenfunctions": error_cov.eigenfunctions.tolist(),
        "eigenvalues": error_cov.eigenvalues.tolist(),
        "nugget": error_cov.nugget,
    }


def _error_cov_from_dict(data):
    if data is None:
        return None
    return ErrorCovariance(
        grid=_arr(data["grid"]),
        eigenfunctions=_arr(data["eigenfunctions"]),
        eigenvalues=_arr(data["eigenvalues"]),
        nugget=float(data["nugget"]),
    )


def fit_to_dict(fit: AffpcFit) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "model": fit.model,
        "eigenbasis": eigenbasis_to_dict(fit.eigenbasis),
        "basis_x": _basis_to_dict(fit.basis_x),
        "basis_s": _basis_to_dict(fit.basis_s),
        "transform": _transform_to_dict(fit.transform),
        "theta": fit.theta.tolist(),
        "lam": list(fit.lam),
        "n_aug": fit.n_aug,
        "include_intercept": fit.include_intercept,
        "scalar_names": list(fit.scalar_names),
        "smooth_covariates": fit.smooth_covariates,
        "covariate_domain": list(fit.covariate_domain),
        "response_domain": list(fit.response_domain),
        "ztz": fit.ztz.tolist(),
        "a_matrix": fit.a_matrix.tolist(),
        "score_cov": fit.score_cov.tolist(),
        "error_cov": _error_cov_to_dict(fit.error_cov),
        "design": fit.design,
        "n_subjects": fit.n_subjects,
        "solve_method": fit.solve_method,
    }


def fit_from_dict(data: dict) -> AffpcFit:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelCompatError(
            f"model file has schema version {version!r}; this build reads {SCHEMA_VERSION}"
        )
    try:
        return AffpcFit(
            model=str(data["model"]),
            eigenbasis=eigenbasis_from_dict(data["eigenbasis"]),
            basis_x=_basis_from_dict(data["basis_x"]),
            basis_s=_basis_from_dict(data["basis_s"]),
            transform=_transform_from_dict(data["transform"]),
            theta=_arr(data["theta"]),
            lam=(float(data["lam"][0]), float(data["lam"][1])),
            n_aug=int(data["n_aug"]),
            include_intercept=bool(data["include_intercept"]),
            scalar_names=tuple(data["scalar_names"]),
            smooth_covariates=bool(data["smooth_covariates"]),
            covariate_domain=(float(data["covariate_domain"][0]),
                              float(data["covariate_domain"][1])),
            response_domain=(float(data["response_domain"][0]),
                             float(data["response_domain"][1])),
            ztz=_arr(data["ztz"]),
            a_matrix=_arr(data["a_matrix"]),
            score_cov=_arr(data["score_cov"]),
            error_cov=_error_cov_from_dict(data["error_cov"]),
            design=str(data["design"]),
            n_subjects=int(data["n_subjects"]),
            solve_method=str(data["solve_method"]),
        )
    except KeyError as exc:
        raise ModelCompatError(f"model file is missing required field {exc}") from None


def save_fit(fit: AffpcFit, path) -> None:
    """Write a fitted model to a JSON file."""
    with open(path, "w") as handle:
        json.dump(fit_to_dict(fit), handle)


def load_fit(path) -> AffpcFit:
    """Read a fitted model back; schema mismatches raise ModelCompatError."""
    with open(path) as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ModelCompatError(f"{path}: not a valid model file ({exc})") from None
    if not isinstance(data, dict):
        raise ModelCompatError(f"{path}: not a model file")
    return fit_from_dict(data)
