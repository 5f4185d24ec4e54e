# SPDX-License-Identifier: MIT


class Error(RuntimeError):
    def __str__(self) -> str:
        return str(self.args[0])


class ConfigError(Error):
    """Error in a fit or study configuration."""


class DimensionError(Error):
    """Shapes disagree with the declared dimensions"""


class ModelConditionError(Error):
    """Requested variances violate the ordering/separation conditions"""


class DegenerateLoadingError(Error):
    """A loading column is identically zero"""


class UndefinedMetricError(Error):
    """R² requested against a constant true column"""


class OracleCapError(Error):
    """Dense oracle requested for a problem that is too large"""


class NotPositiveDefiniteError(Error):
    """Matrix failed a Cholesky factorization"""


class DivergentVarianceError(Error):
    """Asymptotic variance is infinite because row and column variances coincide"""


class InitializationError(Error):
    """Data matrix cannot support the requested number of factors"""


class EstimationError(Error):
    """Likelihood became non-finite while fitting"""


class InputError(Error):
    """Malformed input file"""


#
# Warnings
#


class TwoWayWarning(UserWarning):
    """Base class for diagnostics emitted by this package"""


class NearDegenerateWarning(TwoWayWarning):
    """A row factor variance is close to a column factor variance"""


class ConstraintWarning(TwoWayWarning):
    """Loadings violate the scaled orthonormality constraint"""


class AmbiguousRotationWarning(TwoWayWarning):
    """Repeated eigenvalues make the identifying rotation ambiguous"""


class VarianceFloorWarning(TwoWayWarning):
    """A variance update was clamped to the floor"""


class InitializationWarning(TwoWayWarning):
    """Starting values rest on a fallback guess"""
