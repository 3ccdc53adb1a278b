"""Marginal effects of the fitted SDPD model.

Every effect matrix here has the form ``K^{-1} D`` with ``K = a I - b W``:

* short term  ``K = I - rho W``                 ``D = diag(d)``
* long term   ``K = (1 - phi) I - (rho + gamma) W``
* convergence ``K = I - rho W``,   ``D = (phi - 1) I + (rho + gamma) W``

``d`` is the derivative of ``X_t beta`` with respect to one covariate.  It is
constant for linear terms and varies by unit when the covariate enters
squared or interacted (``gdp``, ``gdp_sq``, ``gdp_x_drylag`` ...), in which
case the period's data must be supplied.

Summaries follow the usual convention: ``direct`` is the mean diagonal
entry, ``indirect`` the mean off-diagonal entry, ``total`` the mean row sum
(``direct + (n - 1) * indirect``), which equals ``beta / (1 - rho)`` in the
short run for a row-stochastic W.  ``direct + indirect`` is also reported as
``total_naive``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import CointegratedKernelError, ValidationError
from .panel import PanelDataset, _base, parse_term
from .weights import SpatialWeights, check_rho

HORIZONS = ("short", "long")


@dataclass(frozen=True)
class EffectSummary:
    direct: float
    indirect: float
    total: float
    n: int

    @property
    def total_naive(self) -> float:
        return self.direct + self.indirect

    def as_dict(self) -> dict:
        return {
            "direct": self.direct,
            "indirect": self.indirect,
            "total": self.total,
            "total_naive": self.total_naive,
        }


@dataclass(frozen=True)
class LocalEffects:
    """Per-unit row sums of the effect matrix split into own and spill-in parts."""

    direct: np.ndarray
    indirect: np.ndarray
    total: np.ndarray


def _key(base, lag):
    return base if lag == 0 else f"{base}_lag" if lag == 1 else f"{base}_lag{lag}"


def derivative_weights(fit, covariate: str, values: Mapping | None = None, lag: int = 0):
    """``d X_t beta / d x_{covariate, t-lag}`` as a scalar or n-vector.

    ``values`` maps ``"gdp"``, ``"dry_lag"`` ... to the period's n-vectors and
    is only consulted for squared or interacted terms.
    """
    total = 0.0
    found = False
    for name, b in zip(fit.covariate_names, fit.beta):
        factors = parse_term(name)
        for i, f in enumerate(factors):
            if f.base != covariate or f.lag != lag:
                continue
            found = True
            term = b * f.power
            if f.power > 1:
                term = term * _lookup(values, f.base, f.lag, name) ** (f.power - 1)
            for j, g in enumerate(factors):
                if j != i:
                    term = term * _lookup(values, g.base, g.lag, name) ** g.power
            total = total + term
    if not found:
        raise ValidationError(f"covariate {_key(covariate, lag)!r} does not enter the model")
    return total


def _lookup(values, base, lag, term):
    key = _key(base, lag)
    if values is None or key not in values:
        raise ValidationError(f"term {term!r} needs per-unit values of {key!r}")
    return np.asarray(values[key], dtype=float)


def is_time_varying(fit, covariate: str, lag: int = 0) -> bool:
    try:
        d = derivative_weights(fit, covariate, None, lag)
    except ValidationError as exc:
        if "needs per-unit values" in str(exc):
            return True
        raise
    return np.ndim(d) > 0


def effect_covariates(fit, lag: int = 0) -> list:
    """Covariates entering the model at the given lag, in model order."""
    out = []
    for name in fit.covariate_names:
        for f in parse_term(name):
            if f.lag == lag and f.base not in out:
                out.append(f.base)
    return out


def _vector(d, n):
    d = np.asarray(d, dtype=float)
    if d.ndim == 0:
        return np.full(n, float(d))
    if d.shape != (n,):
        raise ValidationError(f"per-unit values must have length {n}")
    return d


def _mean(v) -> float:
    """Mean that returns constant vectors exactly."""
    v = np.asarray(v, dtype=float)
    if v.size and np.all(v == v.flat[0]):
        return float(v.flat[0])
    return math.fsum(v.ravel()) / v.size


def _summary(diag_part, row_sums, n) -> EffectSummary:
    direct, total = _mean(diag_part), _mean(row_sums)
    # off-diagonal mass is total - direct per row
    indirect = (total - direct) / (n - 1) if n > 1 else 0.0
    return EffectSummary(direct=direct, indirect=indirect, total=total, n=n)


def _kernel(fit, W: SpatialWeights, horizon: str):
    if horizon == "short":
        check_rho(fit.rho)
        return W.kernel(1.0, fit.rho)
    if horizon == "long":
        a, b = 1.0 - fit.phi, fit.rho + fit.gamma
        if abs(a - b) <= 1e-12 * max(1.0, abs(a)):
            raise CointegratedKernelError(
                f"long-term effects undefined: rho + phi + gamma = {fit.rho + fit.phi + fit.gamma:.12g} = 1"
            )
        if a == 0.0:
            raise CointegratedKernelError("long-term kernel singular: phi = 1 and rho + gamma = 0")
        return W.kernel(a, b)
    raise ValidationError(f"horizon must be one of {HORIZONS}")


def _diag_effects(fit, W, covariate, values, horizon, lag=0):
    kern = _kernel(fit, W, horizon)
    d = _vector(derivative_weights(fit, covariate, values, lag), W.n)
    row_sums = kern.solve(d)
    diag_part = kern.inverse_diagonal() * d
    return diag_part, row_sums


def short_term_effects(fit, W: SpatialWeights, covariate: str, values: Mapping | None = None) -> EffectSummary:
    """Summary of ``(I - rho W)^{-1} diag(d)``."""
    diag_part, row_sums = _diag_effects(fit, W, covariate, values, "short")
    return _summary(diag_part, row_sums, W.n)


def long_term_effects(fit, W: SpatialWeights, covariate: str, values: Mapping | None = None) -> EffectSummary:
    """Summary of ``((1 - phi) I - (rho + gamma) W)^{-1} diag(d)``.

    Raises ``CointegratedKernelError`` when rho + phi + gamma = 1.
    """
    diag_part, row_sums = _diag_effects(fit, W, covariate, values, "long")
    return _summary(diag_part, row_sums, W.n)


def local_effects(fit, W: SpatialWeights, covariate: str, values: Mapping | None = None,
                  horizon: str = "short") -> LocalEffects:
    """Row-wise effects: unit i's own response and the sum of spill-ins to it."""
    diag_part, row_sums = _diag_effects(fit, W, covariate, values, horizon)
    return LocalEffects(direct=diag_part, indirect=row_sums - diag_part, total=row_sums)


def ecm_convergence_effects(fit, W: SpatialWeights) -> EffectSummary:
    """Summary of ``(I - rho W)^{-1} [(phi - 1) I + (rho + gamma) W]``."""
    kern = _kernel(fit, W, "short")
    n = W.n
    M = (fit.phi - 1.0) * _identity(n) + (fit.rho + fit.gamma) * W.sparse
    key = ("ecm", fit.phi, fit.rho + fit.gamma)
    diag_part = kern.diag_of_solve(M, key=key)
    row_sums = kern.solve(np.full(n, fit.phi - 1.0 + fit.rho + fit.gamma))
    return _summary(diag_part, row_sums, n)


def _identity(n):
    from scipy import sparse

    return sparse.identity(n, format="csc")


# --------------------------------------------------------------------------
# per-period evaluation


def period_values(panel: PanelDataset, t: int, max_lag: int = 1) -> dict:
    """Values of every base covariate at period index ``t`` and its lags."""
    out = {}
    bases = set(panel.X)
    if "spei" in panel.X:
        bases |= {"dry", "wet"}
    for base in bases:
        m = _base(base, panel.X)
        for lag in range(max_lag + 1):
            if t - lag >= 0:
                out[_key(base, lag)] = m[:, t - lag]
    return out


def _usable_periods(panel: PanelDataset, max_lag: int):
    return range(max_lag, panel.T)


def time_varying_effects(fit, W: SpatialWeights, panel: PanelDataset, covariate: str = "gdp",
                         horizon: str = "short") -> list:
    """Direct/indirect/total effect of ``covariate`` evaluated at every usable period."""
    max_lag = max((f.lag for n_ in fit.covariate_names for f in parse_term(n_)), default=0)
    rows = []
    for t in _usable_periods(panel, max_lag):
        vals = period_values(panel, t, max_lag)
        s = _summary(*_diag_effects(fit, W, covariate, vals, horizon), W.n)
        rows.append({"period": panel.period_ids[t], **s.as_dict()})
    return rows


def time_varying_gdp_effects(fit, W: SpatialWeights, panel: PanelDataset, horizon: str = "short") -> list:
    return time_varying_effects(fit, W, panel, "gdp", horizon)


def ecm_lagged_effects(fit, panel: PanelDataset, covariates=("dry", "wet"), per_unit: bool = False) -> list:
    """Effect of last period's covariate on the change in y, per period.

    For the weather model: ``dry -> beta_5 + beta_7 * gdp_t`` averaged over
    units (``per_unit=True`` keeps the n-vectors).
    """
    max_lag = max((f.lag for n_ in fit.covariate_names for f in parse_term(n_)), default=0)
    rows = []
    for t in _usable_periods(panel, max(max_lag, 1)):
        vals = period_values(panel, t, max(max_lag, 1))
        row = {"period": panel.period_ids[t]}
        for c in covariates:
            d = _vector(derivative_weights(fit, c, vals, lag=1), panel.n)
            row[c] = d if per_unit else _mean(d)
        rows.append(row)
    return rows


def ecm_lagged_weather_effects(fit, panel: PanelDataset) -> list:
    return ecm_lagged_effects(fit, panel, ("dry", "wet"))


# --------------------------------------------------------------------------
# full report


@dataclass
class EffectsReport:
    """Everything the effects command writes.

    ``table`` holds time-invariant summaries (plus the ECM convergence row),
    ``series`` maps ``(covariate, horizon)`` to per-period rows, ``local`` maps
    ``(covariate, horizon)`` to ``LocalEffects`` and ``skipped`` lists outputs
    that could not be computed, with the reason.
    """

    region: str
    table: list
    series: dict
    ecm_lagged: list
    ecm_lagged_units: list
    local: dict
    local_period: object
    skipped: list


def effects_report(fit, W: SpatialWeights, panel: PanelDataset, region: str = "all") -> EffectsReport:
    """Compute every effect object of a fit on ``panel``.

    Long-run outputs are skipped (and recorded) when ``rho + phi + gamma >= 1``
    since the steady-state multiplier does not exist there.  Local maps of
    covariates with data-dependent derivatives use the last period.
    """
    horizons = list(HORIZONS)
    skipped = []
    if fit.dynamic_sum >= 1.0 - 1e-12:
        horizons = ["short"]
        skipped.append({
            "output": "long-term effects",
            "reason": f"rho + phi + gamma = {fit.dynamic_sum!r} >= 1 (cointegrated or explosive)",
        })
    max_lag = max((f.lag for n_ in fit.covariate_names for f in parse_term(n_)), default=0)
    last = panel.T - 1
    last_vals = period_values(panel, last, max_lag)

    table, series, local = [], {}, {}
    for cov in effect_covariates(fit, 0):
        varying = is_time_varying(fit, cov)
        for h in horizons:
            if varying:
                series[(cov, h)] = time_varying_effects(fit, W, panel, cov, h)
            else:
                s = _summary(*_diag_effects(fit, W, cov, None, h), W.n)
                table.append({"region": region, "variable": cov, "horizon": h, **s.as_dict()})
            local[(cov, h)] = local_effects(fit, W, cov, last_vals if varying else None, h)
    conv = ecm_convergence_effects(fit, W)
    table.append({"region": region, "variable": "ecm_convergence", "horizon": "ecm", **conv.as_dict()})

    lagged = effect_covariates(fit, 1)
    ecm_rows, unit_rows = [], []
    if lagged:
        ecm_rows = ecm_lagged_effects(fit, panel, lagged)
        for row in ecm_lagged_effects(fit, panel, lagged, per_unit=True):
            for i, uid in enumerate(panel.unit_ids):
                unit_rows.append({"period": row["period"], "unit_id": uid,
                                  **{c: float(row[c][i]) for c in lagged}})
    return EffectsReport(region, table, series, ecm_rows, unit_rows, local,
                         panel.period_ids[last], skipped)
