"""Exception hierarchy shared by the estimation, effects and CLI layers."""


class SDPDError(Exception):
    """Base class for all package errors."""


class ValidationError(SDPDError, ValueError):
    """Input data or configuration is malformed."""


class SingularResolventError(SDPDError, ArithmeticError):
    """A spatial kernel ``a*I - b*W`` cannot be inverted."""


class CointegratedKernelError(SingularResolventError):
    """Long-run kernel is singular because rho + phi + gamma = 1."""


class EstimationError(SDPDError, RuntimeError):
    """The likelihood could not be maximized."""


class CollinearityError(EstimationError):
    """The regressor cross-product is singular.

    ``covariates`` lists the columns implicated in the rank deficiency.
    """

    def __init__(self, covariates, message=None):
        self.covariates = list(covariates)
        super().__init__(
            message or "collinear regressors: " + ", ".join(self.covariates)
        )
