"""Synthetic SDPD panels with known parameters and Monte Carlo experiments."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SDPDError, ValidationError
from .panel import DEFAULT_COVARIATES, ModelSpec, PanelDataset, regressor_matrix
from .weights import SpatialWeights, build_knn_weights

GENERATORS = ("iid-normal", "truncated-pair", "country-block", "weather-gdp")
EXPERIMENTS = ("bias", "wald_size", "wald_power", "effect_identity")


@dataclass(frozen=True)
class DGPConfig:
    n: int = 100
    T: int = 10
    burn_in: int = 50
    rho: float = 0.4
    phi: float = 0.3
    gamma: float = 0.1
    beta: tuple = (1.0,)
    sigma: float = 1.0
    fe_individual_scale: float = 1.0
    fe_time_scale: float = 1.0
    covariate_generator: str = "iid-normal"
    seed: int = 0
    k_neighbors: int = 4
    n_countries: int = 4
    y0: float = 0.0
    regime: str = "stable"
    first_year: int = 1

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.n < 2 or self.T < 1:
            raise ValidationError("need n >= 2 and T >= 1")
        if self.burn_in < 0:
            raise ValidationError("burn_in must be >= 0")
        if not self.sigma >= 0:
            raise ValidationError("sigma must be >= 0")
        if self.fe_individual_scale < 0 or self.fe_time_scale < 0:
            raise ValidationError("fixed-effect scales must be >= 0")
        if self.covariate_generator not in GENERATORS:
            raise ValidationError(f"covariate_generator must be one of {GENERATORS}")
        if not 1 <= self.k_neighbors < self.n:
            raise ValidationError(f"k_neighbors={self.k_neighbors} must lie in [1, n)")
        if not -1 < self.rho < 1:
            raise ValidationError(f"rho={self.rho} outside (-1, 1)")
        total = self.rho + self.phi + self.gamma
        if self.regime == "stable" and total >= 1:
            raise ValidationError(
                f"stable regime requested but rho + phi + gamma = {total:.12g} >= 1"
            )
        if self.regime == "cointegrated" and abs(total - 1) > 1e-12:
            raise ValidationError(
                f"cointegrated regime requires rho + phi + gamma = 1, got {total:.12g}"
            )
        if self.regime not in ("stable", "cointegrated", "any"):
            raise ValidationError(f"unknown regime {self.regime!r}")
        if self.covariate_generator == "truncated-pair" and len(self.beta) < 2:
            raise ValidationError("truncated-pair generator needs at least two betas")
        if self.covariate_generator == "weather-gdp" and len(self.beta) != len(DEFAULT_COVARIATES):
            raise ValidationError(f"weather-gdp generator needs {len(DEFAULT_COVARIATES)} betas")

    @property
    def covariate_names(self) -> tuple:
        k = len(self.beta)
        if self.covariate_generator == "truncated-pair":
            return ("dry", "wet") + tuple(f"x{j}" for j in range(3, k + 1))
        if self.covariate_generator == "weather-gdp":
            return DEFAULT_COVARIATES
        return tuple(f"x{j}" for j in range(1, k + 1))

    def model_spec(self, **overrides) -> ModelSpec:
        kw = dict(covariate_names=self.covariate_names, k_neighbors=self.k_neighbors)
        kw.update(overrides)
        return ModelSpec(**kw)

    def replace(self, **changes) -> "DGPConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["beta"] = list(self.beta)
        return d

    @classmethod
    def from_dict(cls, d) -> "DGPConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError("unknown simulation option(s): " + ", ".join(sorted(extra)))
        return cls(**d)


def synthetic_grid(n: int) -> np.ndarray:
    """First ``n`` cells of a ``ceil(sqrt(n))``-wide unit grid, row by row."""
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    idx = np.arange(n)
    return np.column_stack([idx % side, idx // side]).astype(float)


def country_blocks(n: int, n_countries: int) -> np.ndarray:
    """Country index per unit: vertical stripes of the synthetic grid."""
    cols = synthetic_grid(n)[:, 0]
    width = cols.max() + 1
    m = max(1, min(n_countries, int(width)))
    return np.minimum((cols * m // width).astype(int), m - 1)


def dgp_weights(config: DGPConfig) -> SpatialWeights:
    return build_knn_weights(synthetic_grid(config.n), config.k_neighbors)


def _raw_covariates(config: DGPConfig, rng, P: int) -> dict:
    n, k = config.n, len(config.beta)
    gen = config.covariate_generator
    if gen == "iid-normal":
        return {f"x{j}": rng.standard_normal((n, P)) for j in range(1, k + 1)}
    if gen == "truncated-pair":
        raw = {"spei": rng.standard_normal((n, P))}
        raw.update({f"x{j}": rng.standard_normal((n, P)) for j in range(3, k + 1)})
        return raw
    blocks = country_blocks(n, config.n_countries)
    m = blocks.max() + 1
    if gen == "country-block":
        return {f"x{j}": rng.standard_normal((m, P))[blocks] for j in range(1, k + 1)}
    # weather-gdp: income per country with its own level and trend, SPEI per cell
    level = rng.uniform(0.5, 2.0, size=(m, 1))
    trend = rng.uniform(0.0, 0.05, size=(m, 1))
    shocks = 0.1 * rng.standard_normal((m, P))
    gdp = level + trend * np.arange(P) + shocks
    return {"gdp": gdp[blocks], "spei": rng.standard_normal((n, P))}


def simulate(config: DGPConfig, W: SpatialWeights | None = None, rng=None) -> PanelDataset:
    """Forward-simulate the model; the first ``burn_in`` periods are dropped.

    ``y_0 = y0 * ones``.  Identical configs (and seeds) give identical panels.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    W = W or dgp_weights(config)
    if W.n != config.n:
        raise ValidationError("weights do not match config.n")
    n, T = config.n, config.T
    P = config.burn_in + T + 1
    raw = _raw_covariates(config, rng, P)
    alpha = config.fe_individual_scale * rng.standard_normal(n)
    xi = config.fe_time_scale * rng.standard_normal(P)
    eps = config.sigma * rng.standard_normal((n, P))

    xb = np.zeros((n, P))
    for name, b in zip(config.covariate_names, config.beta):
        m = regressor_matrix(name, raw)
        xb += b * np.nan_to_num(m, nan=0.0)  # column 0 is presample only

    solve = W.kernel(1.0, config.rho).solve if config.rho != 0 else (lambda v: v)
    Wm = W.sparse
    y = np.empty((n, P))
    y[:, 0] = config.y0
    for t in range(1, P):
        prev = y[:, t - 1]
        rhs = config.phi * prev + config.gamma * (Wm @ prev) + xb[:, t] + alpha + xi[t] + eps[:, t]
        y[:, t] = solve(rhs)
    keep = slice(P - T, P)
    cents = synthetic_grid(n)
    countries = [f"C{b + 1}" for b in country_blocks(n, config.n_countries)]
    return PanelDataset(
        y=y[:, keep],
        X={k: v[:, keep] for k, v in raw.items()},
        centroids=cents,
        unit_ids=[f"u{i:05d}" for i in range(n)],
        period_ids=list(range(config.first_year, config.first_year + T)),
        country_of_unit=countries,
    )


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(rep)]))


@dataclass
class MonteCarloSummary:
    experiment: str
    n_reps: int
    n_failed: int
    rows: list
    failures: list = field(default_factory=list)
    replications: list = field(default_factory=list)

    def row(self, parameter: str) -> dict:
        for r in self.rows:
            if r["parameter"] == parameter:
                return r
        raise KeyError(parameter)


def _moments(values, truth):
    v = np.asarray(values, dtype=float)
    R = v.size
    mean = float(v.mean())
    sd = float(v.std(ddof=1)) if R > 1 else 0.0
    bias = mean - truth
    mc_se = sd / math.sqrt(R)
    return {
        "true": float(truth),
        "mean": mean,
        "bias": bias,
        "sd": sd,
        "rmse": float(np.sqrt(np.mean((v - truth) ** 2))),
        "mc_se": mc_se,
        "bias_t": bias / mc_se if mc_se > 0 else (0.0 if bias == 0 else math.copysign(math.inf, bias)),
        "n_ok": R,
    }


def _one_replication(config, W, spec, experiment, alpha, rep, fit_kwargs):
    from .effects import long_term_effects, short_term_effects
    from .estimator import fit, wald_cointegration_test

    panel = simulate(config, W, rng=replication_rng(config.seed, rep))
    res = fit(panel, W, spec, **{"compute_r2": False, "warn_unstable": False, **fit_kwargs})
    rec = {"rep": rep, "params": dict(zip(res.param_names, map(float, res.params)))}
    if experiment in ("wald_size", "wald_power"):
        rep_ = wald_cointegration_test(res, alpha)
        rec.update(wald_stat=rep_.wald_stat, p_value=rep_.p_value, reject=bool(rep_.p_value < alpha))
    if experiment == "effect_identity":
        gaps = {}
        for name in res.covariate_names:
            s = short_term_effects(res, W, name)
            gaps[f"{name}:short"] = abs(s.total - res.coef(name) / (1 - res.rho))
            if res.dynamic_sum < 1:
                lt = long_term_effects(res, W, name)
                gaps[f"{name}:long"] = abs(lt.total - res.coef(name) / (1 - res.dynamic_sum))
        rec["identity_gap"] = gaps
    return rec


def monte_carlo(config: DGPConfig, n_reps: int, experiment: str = "bias", *,
                spec: ModelSpec | None = None, alpha: float = 0.05, threads: int = 1,
                **fit_kwargs) -> MonteCarloSummary:
    """Repeat simulate-and-fit ``n_reps`` times and summarize.

    Replication ``r`` draws from ``SeedSequence([config.seed, r])`` so results
    do not depend on scheduling; failures are counted, not dropped silently.
    """
    if n_reps < 1:
        raise ValidationError("n_reps must be >= 1")
    if experiment not in EXPERIMENTS:
        raise ValidationError(f"experiment must be one of {EXPERIMENTS}")
    total = config.rho + config.phi + config.gamma
    if experiment == "wald_size" and abs(total - 1) > 1e-12:
        raise ValidationError("wald_size needs a cointegrated DGP (rho + phi + gamma = 1)")
    spec = spec or config.model_spec()
    W = dgp_weights(config)
    W.eigenvalues()  # warm the shared cache before fanning out

    def task(rep):
        try:
            return _one_replication(config, W, spec, experiment, alpha, rep, fit_kwargs)
        except (SDPDError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(task, range(n_reps)))
    else:
        records = [task(r) for r in range(n_reps)]
    records.sort(key=lambda r: r["rep"])
    ok = [r for r in records if "error" not in r]
    failures = [r for r in records if "error" in r]
    rows = _summarize(config, experiment, ok, alpha) if ok else []
    return MonteCarloSummary(experiment, n_reps, len(failures), rows, failures, records)


def _summarize(config, experiment, ok, alpha):
    ok = sorted(ok, key=lambda r: r["rep"])  # aggregate in index order whatever the arrival order
    truth = {"rho": config.rho, "phi": config.phi, "gamma": config.gamma}
    truth.update(dict(zip(config.covariate_names, config.beta)))
    truth["sigma_sq"] = config.sigma**2
    if experiment == "bias":
        rows = []
        for name, true in truth.items():
            vals = [r["params"][name] for r in ok]
            rows.append({"parameter": name, **_moments(vals, true)})
        return rows
    if experiment in ("wald_size", "wald_power"):
        rej = np.array([r["reject"] for r in ok], dtype=float)
        p = float(rej.mean())
        return [{
            "parameter": "rho+phi+gamma",
            "true": config.rho + config.phi + config.gamma,
            "alpha": alpha,
            "rejection_rate": p,
            "mc_se": math.sqrt(p * (1 - p) / rej.size),
            "mean_stat": float(np.mean([r["wald_stat"] for r in ok])),
            "n_ok": int(rej.size),
        }]
    keys = list(ok[0]["identity_gap"])
    return [{
        "parameter": key,
        "max_abs_gap": float(max(r["identity_gap"][key] for r in ok)),
        "n_ok": len(ok),
    } for key in keys]
