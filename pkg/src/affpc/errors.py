"""Exception taxonomy shared across the package.

Every error raised on a documented contract derives from
:class:`AffpcError`.  The class hierarchy doubles as the command line
exit-code map: input and validation problems exit with 2, numerical
failures with 3, and model-compatibility problems with 4.
"""


class AffpcError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(AffpcError):
    """Invalid user input: malformed data, bad grids, bad configuration."""

    exit_code = 2


class NumericalError(AffpcError):
    """A numerical step failed or produced a degenerate result."""

    exit_code = 3


class CompatError(AffpcError):
    """Fitted model and supplied data (or schema) are incompatible."""

    exit_code = 4


# --- input / validation -------------------------------------------------

class InvalidGrid(InputError):
    """Grid is not strictly increasing or lies outside its domain."""


class TooFewPoints(InputError):
    """A curve has fewer observation points than the operation needs."""


class FormatError(InputError):
    """Malformed input file: missing columns, bad values, bad types."""


class DuplicateArgument(InputError):
    """Duplicated (subject, variable, argument) row in an input file."""


class InvalidBasisSize(InputError):
    """Basis construction violates its preconditions."""


class OutOfDomain(InputError):
    """Evaluation points fall outside the basis domain."""


class TooFewSubjects(InputError):
    """An estimate that pools across subjects got fewer than two."""


class GridTooShort(InputError):
    """Evaluation grid has fewer than two points."""


class InvalidLambda(InputError):
    """Smoothing parameter is negative or not finite."""


class ConfigError(InputError):
    """Malformed run configuration (unknown key, bad value)."""


# --- numerical ----------------------------------------------------------

class SingularGram(NumericalError):
    """Gram matrix numerically singular; basis cannot be orthonormalized."""


class DegenerateCovariance(NumericalError):
    """Estimated covariance is numerically zero or unusable."""


class ScoreUndefined(NumericalError):
    """A subject carries no information for score estimation."""


class DegenerateCovariate(NumericalError):
    """Pointwise covariate spread falls below the standardization floor."""


class SingularSystem(NumericalError):
    """Penalized normal equations are singular; raise the penalty or
    lower the number of tensor coefficients."""


class GcvDegenerate(NumericalError):
    """No smoothing-parameter candidate yields a valid selection score."""


class InvalidScoreCov(NumericalError):
    """Score covariance is not positive semidefinite."""


class BootstrapDegenerate(NumericalError):
    """A bootstrap replicate stayed degenerate after the redraw limit."""


class ExperimentUnstable(NumericalError):
    """Too many Monte Carlo replicates failed to produce a fit."""


# --- compatibility ------------------------------------------------------

class ModelCompatError(CompatError):
    """Serialized model has an unknown schema or missing fields."""


class MissingCovariate(CompatError):
    """Model expects scalar covariates the supplied data does not carry."""


class GridMismatch(CompatError):
    """Arrays that must share a grid do not."""
