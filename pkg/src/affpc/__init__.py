"""Additive function-on-function regression with a principal-component
response basis.

The response curve is expanded in the eigenfunctions of its own
covariance; each score is regressed on tensor-product B-spline features
of the (standardized) covariate curve, with anisotropic curvature
penalties solved in closed form.  Pointwise prediction bands come from a
subject-level bootstrap combined with a plug-in conditional variance.
"""

__version__ = "0.1.0"

from .errors import AffpcError
from .funcdata import (
    CovariateCurve,
    FunctionalDataset,
    QuadratureRule,
    SubjectRecord,
    curve_of,
    load_covariate_csv,
    load_csv,
    save_csv,
    smooth_curve,
    trapezoid_rule,
)
from .basis import (
    BSplineBasis,
    PenaltyMatrix,
    make_basis,
    orthonormalize,
    second_derivative_penalty,
)
from .fpca import (
    EigenBasis,
    ErrorCovariance,
    FpcaResult,
    ScoreMatrix,
    compute_scores,
    decompose_error_covariance,
    eigendecompose,
    estimate_covariance,
    estimate_mean,
    fit_response_fpca,
)
from .model import (
    AffpcFit,
    CovariateTransform,
    DesignMatrix,
    LambdaSelection,
    SolveResult,
    assemble_penalty,
    beta_surface,
    build_design,
    build_flm_design,
    evaluate_surface,
    fit_affpc,
    fit_flm,
    fit_transform,
    g_surface,
    predict_curve,
    predict_dataset,
    select_lambda,
    solve,
)
from .inference import (
    BootstrapConfig,
    BootstrapResult,
    CoverageReport,
    PredictionBand,
    bootstrap_variance,
    conditional_variance,
    coverage_evaluate,
    prediction_band,
    prediction_bands,
)
from .sim import (
    McReport,
    SimConfig,
    relative_gain,
    rmspe,
    run_experiment,
    run_replicate,
    true_kernel,
)
from .serialize import SCHEMA_VERSION, load_fit, save_fit

__all__ = [
    "AffpcError",
    "AffpcFit",
    "BootstrapConfig",
    "BootstrapResult",
    "BSplineBasis",
    "CovariateCurve",
    "CovariateTransform",
    "CoverageReport",
    "DesignMatrix",
    "EigenBasis",
    "ErrorCovariance",
    "FpcaResult",
    "FunctionalDataset",
    "LambdaSelection",
    "McReport",
    "PenaltyMatrix",
    "PredictionBand",
    "QuadratureRule",
    "SCHEMA_VERSION",
    "ScoreMatrix",
    "SimConfig",
    "SolveResult",
    "SubjectRecord",
    "assemble_penalty",
    "beta_surface",
    "bootstrap_variance",
    "build_design",
    "build_flm_design",
    "compute_scores",
    "conditional_variance",
    "coverage_evaluate",
    "curve_of",
    "decompose_error_covariance",
    "eigendecompose",
    "estimate_covariance",
    "estimate_mean",
    "evaluate_surface",
    "fit_affpc",
    "fit_flm",
    "fit_response_fpca",
    "fit_transform",
    "g_surface",
    "load_covariate_csv",
    "load_csv",
    "load_fit",
    "make_basis",
    "orthonormalize",
    "predict_curve",
    "predict_dataset",
    "prediction_band",
    "prediction_bands",
    "relative_gain",
    "rmspe",
    "run_experiment",
    "run_replicate",
    "save_csv",
    "save_fit",
    "second_derivative_penalty",
    "select_lambda",
    "smooth_curve",
    "solve",
    "trapezoid_rule",
    "true_kernel",
    "__version__",
]
