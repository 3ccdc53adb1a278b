"""Spatial dynamic panel data models: QMLE, cointegration test, marginal effects."""

__version__ = "0.1.0"

from .effects import (
    EffectsReport,
    EffectSummary,
    ecm_convergence_effects,
    ecm_lagged_weather_effects,
    effects_report,
    local_effects,
    long_term_effects,
    short_term_effects,
    time_varying_gdp_effects,
)
from .errors import (
    CointegratedKernelError,
    CollinearityError,
    EstimationError,
    SDPDError,
    SingularResolventError,
    ValidationError,
)
from .estimator import (
    FitResult,
    StabilityReport,
    concentrated_loglik,
    fit,
    pseudo_r2,
    wald_cointegration_test,
)
from .panel import (
    DEFAULT_COVARIATES,
    CovariateSet,
    ModelSpec,
    PanelDataset,
    Schema,
    build_covariates,
    load_schema,
    read_panel,
    split_spei,
    time_first_difference,
    within_transform,
    write_panel,
)
from .simulate import DGPConfig, MonteCarloSummary, dgp_weights, monte_carlo, simulate
from .weights import (
    SpatialWeights,
    build_knn_weights,
    log_det_resolvent,
    solve_resolvent,
    spatial_lag,
)
