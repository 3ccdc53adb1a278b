"""Balanced spatio-temporal panels, regressor construction and FE transforms.

Panels are stored wide: every variable is an ``(n, T)`` array with units in
rows and periods in columns.  Regressors are named with a small grammar so a
model can ask for engineered terms without the data carrying them:

``gdp``            raw column (or ``dry``/``wet`` derived from ``spei``)
``gdp_sq``         elementwise square
``dry_lag``        one-period lag (``drylag`` is accepted inside products)
``gdp_x_drylag``   product of factors separated by ``_x_``

Lagged terms have ``NaN`` in their first column; callers drop that period.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from .errors import ValidationError

FIXED_EFFECTS = ("individual", "time", "both")
DIFFERENCING = ("none", "time_first_difference")
LIKELIHOODS = ("transformed", "direct")

# regressor order of the weather/income specification, beta_1 ... beta_8
DEFAULT_COVARIATES = (
    "gdp",
    "gdp_sq",
    "dry",
    "wet",
    "dry_lag",
    "wet_lag",
    "gdp_x_drylag",
    "gdp_x_wetlag",
)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced panel of ``n`` units observed over ``T`` periods.

    ``centroids`` is ``(n, 2)`` holding ``(lon, lat)`` (or planar x, y).
    """

    y: np.ndarray
    X: Mapping[str, np.ndarray]
    centroids: np.ndarray
    unit_ids: tuple
    period_ids: tuple
    country_of_unit: tuple = None
    y_name: str = "y"

    def __post_init__(self):
        y = _frozen(self.y)
        if y.ndim != 2:
            raise ValidationError(f"y must be (n, T), got shape {y.shape}")
        n, T = y.shape
        X = {}
        for name, m in dict(self.X).items():
            m = _frozen(m)
            if m.shape != (n, T):
                raise ValidationError(
                    f"covariate {name!r} has shape {m.shape}, expected {(n, T)}"
                )
            X[name] = m
        cents = _frozen(self.centroids)
        if cents.shape != (n, 2):
            raise ValidationError(f"centroids must be ({n}, 2), got {cents.shape}")
        unit_ids = tuple(self.unit_ids)
        period_ids = tuple(self.period_ids)
        if len(unit_ids) != n or len(set(unit_ids)) != n:
            raise ValidationError("unit_ids must be unique with one id per row")
        if len(period_ids) != T:
            raise ValidationError("period_ids must have one label per column")
        if any(b <= a for a, b in zip(period_ids, period_ids[1:])):
            raise ValidationError("period_ids must be strictly increasing")
        country = self.country_of_unit
        country = tuple(country) if country is not None else ("",) * n
        if len(country) != n:
            raise ValidationError("country_of_unit must have one label per unit")
        for name, m in [(self.y_name, y), *X.items()]:
            bad = np.argwhere(~np.isfinite(m))
            if bad.size:
                i, t = bad[0]
                raise ValidationError(
                    f"non-finite {name} for unit {unit_ids[i]!r}, period {period_ids[t]!r}"
                )
        if not np.isfinite(cents).all():
            raise ValidationError("centroids must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "centroids", cents)
        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "period_ids", period_ids)
        object.__setattr__(self, "country_of_unit", country)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    def replace(self, **changes) -> "PanelDataset":
        return dataclasses.replace(self, **changes)

    def take_units(self, index) -> "PanelDataset":
        """Subset (or reorder) units by integer index or boolean mask."""
        idx = np.arange(self.n)[np.asarray(index)]
        return PanelDataset(
            y=self.y[idx],
            X={k: v[idx] for k, v in self.X.items()},
            centroids=self.centroids[idx],
            unit_ids=[self.unit_ids[i] for i in idx],
            period_ids=self.period_ids,
            country_of_unit=[self.country_of_unit[i] for i in idx],
            y_name=self.y_name,
        )

    def select_countries(self, countries: Sequence[str]) -> "PanelDataset":
        wanted = set(countries)
        mask = np.array([c in wanted for c in self.country_of_unit])
        if not mask.any():
            raise ValidationError(f"no units belong to countries {sorted(wanted)}")
        return self.take_units(mask)

    def to_frame(self) -> pd.DataFrame:
        """Long-form frame with one row per unit-period."""
        n, T = self.y.shape
        cols = {
            "unit_id": np.repeat(np.array(self.unit_ids, dtype=object), T),
            "year": np.tile(np.array(self.period_ids, dtype=object), n),
            "lat": np.repeat(self.centroids[:, 1], T),
            "lon": np.repeat(self.centroids[:, 0], T),
            "country": np.repeat(np.array(self.country_of_unit, dtype=object), T),
            self.y_name: self.y.ravel(),
        }
        for name, m in self.X.items():
            cols[name] = m.ravel()
        return pd.DataFrame(cols)


@dataclass(frozen=True)
class ModelSpec:
    """Which terms enter the model and how fixed effects are removed."""

    covariate_names: tuple = DEFAULT_COVARIATES
    include_spatial_lag: bool = True
    include_time_lag: bool = True
    include_space_time_lag: bool = True
    fixed_effects: str = "both"
    differencing: str = "none"
    k_neighbors: int = 11
    distance: str = "euclidean"
    likelihood: str = "transformed"

    def __post_init__(self):
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.likelihood not in LIKELIHOODS:
            raise ValidationError(
                f"likelihood must be one of {LIKELIHOODS}, got {self.likelihood!r}"
            )
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise ValidationError("duplicate covariate names in model spec")
        if self.fixed_effects not in FIXED_EFFECTS:
            raise ValidationError(
                f"fixed_effects must be one of {FIXED_EFFECTS}, got {self.fixed_effects!r}"
            )
        if self.differencing not in DIFFERENCING:
            raise ValidationError(
                f"differencing must be one of {DIFFERENCING}, got {self.differencing!r}"
            )
        if int(self.k_neighbors) < 1:
            raise ValidationError("k_neighbors must be a positive integer")
        if self.distance not in ("euclidean", "great_circle"):
            raise ValidationError(f"unknown distance {self.distance!r}")

    @property
    def uses_lags(self) -> bool:
        return (
            self.include_time_lag
            or self.include_space_time_lag
            or any(term_max_lag(name) > 0 for name in self.covariate_names)
        )

    def validate(self, panel: PanelDataset) -> None:
        missing = [c for c in self.covariate_names if not can_resolve(c, panel.X)]
        if missing:
            raise ValidationError("unknown covariate(s): " + ", ".join(missing))
        if self.k_neighbors >= panel.n:
            raise ValidationError(
                f"k_neighbors={self.k_neighbors} must be smaller than n={panel.n}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["covariate_names"] = list(self.covariate_names)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        if "covariates" in d:
            d["covariate_names"] = d.pop("covariates")
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError("unknown model option(s): " + ", ".join(sorted(extra)))
        return cls(**d)


# --------------------------------------------------------------------------
# SPEI and regressor construction


def split_spei(spei):
    """Split a signed SPEI index into non-negative dryness and wetness parts."""
    spei = np.asarray(spei, dtype=float)
    bad = np.argwhere(~np.isfinite(np.atleast_2d(spei)))
    if bad.size:
        i, t = bad[0]
        raise ValidationError(f"non-finite SPEI value at unit {i}, period {t}")
    dry = np.maximum(-spei, 0.0)
    wet = np.maximum(spei, 0.0)
    # keep +0.0 (not -0.0) so that wet - dry reproduces the input bit-for-bit
    return dry + 0.0, wet + 0.0


@dataclass(frozen=True)
class Factor:
    base: str
    lag: int = 0
    power: int = 1


def parse_term(name: str, raw: Mapping | None = None) -> tuple:
    """Split a regressor name into its factors.

    Names present verbatim in ``raw`` are never decomposed.
    """
    raw = raw or {}
    if name in raw:
        return (Factor(name),)
    parts = name.split("_x_")
    return tuple(_parse_factor(p, raw) for p in parts)


def _parse_factor(s: str, raw: Mapping) -> Factor:
    if s in raw:
        return Factor(s)
    if s.endswith("_sq"):
        f = _parse_factor(s[:-3], raw)
        return Factor(f.base, f.lag, f.power * 2)
    if s.endswith("_lag"):
        f = _parse_factor(s[:-4], raw)
        return Factor(f.base, f.lag + 1, f.power)
    if s.endswith("lag") and len(s) > 3:
        f = _parse_factor(s[:-3], raw)
        return Factor(f.base, f.lag + 1, f.power)
    return Factor(s)


def term_max_lag(name: str, raw: Mapping | None = None) -> int:
    return max(f.lag for f in parse_term(name, raw))


def _base(name: str, raw: Mapping) -> np.ndarray:
    if name in raw:
        return np.asarray(raw[name], dtype=float)
    if name in ("dry", "wet") and "spei" in raw:
        dry, wet = split_spei(raw["spei"])
        return dry if name == "dry" else wet
    raise ValidationError(f"unknown covariate {name!r}")


def can_resolve(name: str, raw: Mapping) -> bool:
    try:
        for f in parse_term(name, raw):
            _base(f.base, raw)
    except ValidationError:
        return False
    return True


def lag_matrix(m: np.ndarray, lag: int = 1) -> np.ndarray:
    out = np.full(m.shape, np.nan)
    if lag < m.shape[1]:
        out[:, lag:] = m[:, : m.shape[1] - lag]
    return out


def regressor_matrix(name: str, raw: Mapping) -> np.ndarray:
    """Evaluate one named regressor on raw ``(n, T)`` covariates."""
    out = None
    for f in parse_term(name, raw):
        v = _base(f.base, raw)
        if f.lag:
            v = lag_matrix(v, f.lag)
        v = v**f.power
        out = v if out is None else out * v
    return out


def regressor_matrices(panel: PanelDataset, names: Sequence[str]) -> dict:
    missing = [c for c in names if not can_resolve(c, panel.X)]
    if missing:
        raise ValidationError("unknown covariate(s): " + ", ".join(missing))
    return {name: regressor_matrix(name, panel.X) for name in names}


@dataclass(frozen=True, eq=False)
class CovariateSet:
    """The eight income/weather regressors, each ``(n, T)``.

    Lagged matrices (and interactions with them) carry ``NaN`` in column 0;
    ``periods_lost`` records that one period is unusable.
    """

    gdp: np.ndarray
    gdp_sq: np.ndarray
    dry: np.ndarray
    wet: np.ndarray
    dry_lag: np.ndarray
    wet_lag: np.ndarray
    gdp_x_drylag: np.ndarray
    gdp_x_wetlag: np.ndarray
    periods_lost: int = 1

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in DEFAULT_COVARIATES}

    def usable(self) -> dict:
        """All matrices restricted to the periods where every lag exists."""
        return {k: v[:, self.periods_lost :] for k, v in self.as_dict().items()}


def build_covariates(panel: PanelDataset, spec: ModelSpec | None = None) -> CovariateSet:
    """Engineer GDP, its square, dry/wet, their lags and GDP interactions."""
    if panel.T < 2:
        raise ValidationError(f"at least 2 periods are needed for lags, got T={panel.T}")
    if spec is not None:
        spec.validate(panel)
    for need in ("gdp", "dry", "wet"):
        if not can_resolve(need, panel.X):
            raise ValidationError(f"missing covariate {need!r}")
    mats = regressor_matrices(panel, DEFAULT_COVARIATES)
    return CovariateSet(**mats, periods_lost=1)


# --------------------------------------------------------------------------
# transforms


def difference_matrix(m: np.ndarray) -> np.ndarray:
    return np.diff(m, axis=1)


def time_first_difference(panel: PanelDataset) -> PanelDataset:
    """First-difference y and every covariate over consecutive periods."""
    if panel.T < 3:
        raise ValidationError(
            f"time differencing of a dynamic model needs T >= 3, got T={panel.T}"
        )
    return panel.replace(
        y=difference_matrix(panel.y),
        X={k: difference_matrix(v) for k, v in panel.X.items()},
        period_ids=panel.period_ids[1:],
    )


def demean(m: np.ndarray, fe: str) -> np.ndarray:
    """Remove unit means, period means, or both from an ``(n, T)`` array."""
    m = np.asarray(m, dtype=float)
    if fe == "individual":
        return m - m.mean(axis=1, keepdims=True)
    if fe == "time":
        return m - m.mean(axis=0, keepdims=True)
    if fe == "both":
        return (
            m
            - m.mean(axis=1, keepdims=True)
            - m.mean(axis=0, keepdims=True)
            + m.mean()
        )
    raise ValidationError(f"fixed effects must be one of {FIXED_EFFECTS}, got {fe!r}")


def within_transform(panel: PanelDataset, fe: str) -> PanelDataset:
    return panel.replace(
        y=demean(panel.y, fe), X={k: demean(v, fe) for k, v in panel.X.items()}
    )


# --------------------------------------------------------------------------
# delimited-text ingestion

ID_COLUMNS = ("unit_id", "year", "lat", "lon", "country")


@dataclass(frozen=True)
class Schema:
    """Names the dependent variable and covariate columns of a long table."""

    dependent: str = "y"
    covariates: tuple = ()
    delimiter: str = ","
    columns: dict = field(default_factory=dict)

    def column(self, role: str) -> str:
        return self.columns.get(role, role)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        d = dict(d)
        cols = {r: d.pop(r) for r in ID_COLUMNS if r in d}
        cols.update(d.pop("columns", {}) or {})
        schema = cls(
            dependent=d.pop("dependent", "y"),
            covariates=tuple(d.pop("covariates", ())),
            delimiter=d.pop("delimiter", ","),
            columns=cols,
        )
        if d:
            raise ValidationError("unknown schema key(s): " + ", ".join(sorted(d)))
        return schema

    def to_dict(self) -> dict:
        out = {"dependent": self.dependent, "covariates": list(self.covariates)}
        if self.delimiter != ",":
            out["delimiter"] = self.delimiter
        out.update(self.columns)
        return out


def load_schema(path) -> Schema:
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    if not isinstance(d, dict):
        raise ValidationError(f"schema manifest {path} must be a mapping")
    return Schema.from_dict(d)


def read_panel(path, schema: Schema) -> PanelDataset:
    """Read a long-form delimited table into a validated balanced panel."""
    path = Path(path)
    try:
        df = pd.read_csv(
            path, sep=schema.delimiter, dtype=str, keep_default_na=False
        )
    except (OSError, pd.errors.ParserError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    df.columns = [c.strip() for c in df.columns]
    c_unit, c_year = schema.column("unit_id"), schema.column("year")
    c_lat, c_lon = schema.column("lat"), schema.column("lon")
    c_country = schema.column("country")
    value_cols = [schema.dependent, *schema.covariates]
    needed = [c_unit, c_year, c_lat, c_lon, c_country, *value_cols]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing column(s) " + ", ".join(missing))
    if df.empty:
        raise ValidationError(f"{path}: no data rows")

    df[c_unit] = df[c_unit].str.strip()
    years = pd.to_numeric(df[c_year].str.strip(), errors="coerce")
    if years.isna().any() or (years != np.floor(years)).any():
        row = int(np.flatnonzero(years.isna() | (years != np.floor(years)))[0])
        raise ValidationError(f"{path}: bad year {df[c_year].iloc[row]!r} on data row {row + 1}")
    df[c_year] = years.astype(np.int64)
    for c in (c_lat, c_lon, *value_cols):
        vals = pd.to_numeric(df[c].str.strip(), errors="coerce")
        bad = ~np.isfinite(vals.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"{path}: invalid value {df[c].iloc[row]!r} in column {c!r} "
                f"for unit {df[c_unit].iloc[row]!r}, year {df[c_year].iloc[row]}"
            )
        df[c] = vals.astype(float)

    dup = df.duplicated([c_unit, c_year])
    if dup.any():
        row = df[dup].iloc[0]
        raise ValidationError(
            f"{path}: duplicate record for unit {row[c_unit]!r}, year {row[c_year]}"
        )
    units = list(dict.fromkeys(df[c_unit]))
    years_sorted = sorted(set(df[c_year]))
    n, T = len(units), len(years_sorted)
    if len(df) != n * T:
        counts = df.groupby(c_unit, sort=False)[c_year].count()
        short = counts[counts < T]
        raise ValidationError(
            f"{path}: unbalanced panel, {len(short)} unit(s) miss periods "
            f"(e.g. unit {short.index[0]!r} has {int(short.iloc[0])} of {T})"
        )
    df = df.set_index([c_unit, c_year]).sort_index()
    df = df.loc[pd.MultiIndex.from_product([units, years_sorted])]

    per_unit = df.groupby(level=0, sort=False)
    for c in (c_lat, c_lon, c_country):
        varying = per_unit[c].nunique()
        if (varying > 1).any():
            raise ValidationError(
                f"{path}: column {c!r} varies within unit {varying[varying > 1].index[0]!r}"
            )
    first = per_unit.first().loc[units]

    def wide(c):
        return df[c].to_numpy(dtype=float).reshape(n, T)

    return PanelDataset(
        y=wide(schema.dependent),
        X={c: wide(c) for c in schema.covariates},
        centroids=np.column_stack([first[c_lon].to_numpy(float), first[c_lat].to_numpy(float)]),
        unit_ids=units,
        period_ids=years_sorted,
        country_of_unit=[str(c) for c in first[c_country]],
        y_name=schema.dependent,
    )


def write_panel(panel: PanelDataset, path, delimiter: str = ",") -> None:
    df = panel.to_frame()
    df.to_csv(path, sep=delimiter, index=False, float_format=_repr_float)


def _repr_float(x):
    return repr(float(x))


def panel_schema(panel: PanelDataset) -> Schema:
    return Schema(dependent=panel.y_name, covariates=tuple(panel.X))
