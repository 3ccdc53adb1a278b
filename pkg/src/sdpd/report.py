"""Human tables and machine files for fits, tests and effects.

Machine files (CSV, JSON) carry full double precision via ``repr``; human
tables round to five significant digits.  Nothing here depends on wall-clock
time so identical inputs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, "+"))
NA = "NA"

PARAM_LABELS = {"rho": "rho (W y_t)", "phi": "phi (y_t-1)", "gamma": "gamma (W y_t-1)", "sigma_sq": "sigma^2"}


def stars(p) -> str:
    """Significance marker: ``+`` 0.1, ``*`` 0.05, ``**`` 0.01, ``***`` 0.001."""
    if p is None or not math.isfinite(p):
        return ""
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return ""


def sig5(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return NA
    return f"{float(x):.5g}"


def machine(x):
    """Cell text for machine files: ``repr`` for floats, ``NA`` for missing."""
    if x is None:
        return NA
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return repr(x) if math.isfinite(x) else NA
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_csv(path, header, rows) -> Path:
    """Write dict rows under ``header`` with full-precision floats."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([machine(row.get(h)) for h in header])
    return path


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, default=_json_default, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj))
    return path


# --------------------------------------------------------------------------
# fit output


def coefficient_rows(fit) -> list:
    se, pv = fit.std_errors, fit.p_values
    rows = []
    for name, est, s, p in zip(fit.param_names, fit.params, se, pv):
        active = not (name in ("rho", "phi", "gamma") and s == 0 and est == 0)
        rows.append({
            "parameter": name,
            "estimate": float(est),
            "std_error": float(s) if fit.vcov_usable and active else None,
            "z": float(est / s) if fit.vcov_usable and s > 0 else None,
            "p_value": float(p) if fit.vcov_usable and s > 0 else None,
            "stars": stars(p) if fit.vcov_usable and name != "sigma_sq" else "",
        })
    return rows


COEF_HEADER = ["parameter", "estimate", "std_error", "z", "p_value", "stars"]


def ancillary(fit) -> dict:
    r2 = fit.pseudo_r2 or {}
    return {
        "n_obs": int(fit.n_obs),
        "n_groups": int(fit.n_groups),
        "n_years": int(fit.n_years),
        "loglik": float(fit.loglik),
        "mean_fixed_effect": fit.fe_means.get("mean_fixed_effect"),
        "pseudo_r2_within": r2.get("within"),
        "pseudo_r2_between": r2.get("between"),
        "pseudo_r2_overall": r2.get("overall"),
    }


def coefficient_table(fit, title: str = "QMLE estimates") -> str:
    """Estimates with stars, standard errors in parentheses below each."""
    rows = coefficient_rows(fit)
    label = {r["parameter"]: PARAM_LABELS.get(r["parameter"], r["parameter"]) for r in rows}
    width = max(len(v) for v in [*label.values(), "Mean of fixed effects"]) + 2
    lines = [title, "=" * (width + 18)]
    for r in rows:
        lines.append(f"{label[r['parameter']]:<{width}}{sig5(r['estimate']):>12} {r['stars']}".rstrip())
        if r["std_error"] is not None:
            lines.append(f"{'':<{width}}{'(' + sig5(r['std_error']) + ')':>12}")
    lines.append("-" * (width + 18))
    a = ancillary(fit)
    block = [
        ("N. obs.", str(a["n_obs"])),
        ("N. groups", str(a["n_groups"])),
        ("N. years", str(a["n_years"])),
        ("Log-likelihood", sig5(a["loglik"])),
        ("Mean of fixed effects", sig5(a["mean_fixed_effect"])),
        ("Pseudo R2 within", sig5(a["pseudo_r2_within"])),
        ("Pseudo R2 between", sig5(a["pseudo_r2_between"])),
        ("Pseudo R2 overall", sig5(a["pseudo_r2_overall"])),
    ]
    lines += [f"{k:<{width}}{v:>12}" for k, v in block]
    lines.append("=" * (width + 18))
    lines.append("Significance: + 0.1, * 0.05, ** 0.01, *** 0.001")
    if not fit.vcov_usable:
        lines.append("Covariance unusable: standard errors not reported")
    for note in fit.notes:
        lines.append(f"Note: {note}")
    return "\n".join(lines) + "\n"


def write_fit(fit, out_dir, title: str = "QMLE estimates") -> list:
    out = Path(out_dir)
    files = [
        write_json(out / "fit.json", fit.to_dict()),
        write_csv(out / "coefficients.csv", COEF_HEADER, coefficient_rows(fit)),
        write_csv(out / "ancillary.csv", ["statistic", "value"],
                  [{"statistic": k, "value": v} for k, v in ancillary(fit).items()]),
    ]
    path = out / "coefficients.txt"
    path.write_text(coefficient_table(fit, title))
    files.append(path)
    return files


def write_stability(report, out_dir) -> Path:
    return write_json(Path(out_dir) / "stability.json", report.to_dict())


# --------------------------------------------------------------------------
# effects output

EFFECT_HEADER = ["region", "variable", "horizon", "direct", "indirect", "total", "total_naive"]
SERIES_HEADER = ["region", "variable", "horizon", "period", "direct", "indirect", "total", "total_naive"]
LOCAL_HEADER = ["unit_id", "lon", "lat", "value", "direct", "indirect"]


def write_effects(report, panel, out_dir) -> list:
    """Effect table, one file per time-varying series, ECM series and maps."""
    out = Path(out_dir)
    files = [write_csv(out / "effects_table.csv", EFFECT_HEADER, report.table)]
    for (cov, h), rows in report.series.items():
        rows = [{"region": report.region, "variable": cov, "horizon": h, **r} for r in rows]
        files.append(write_csv(out / f"tv_{cov}_{h}.csv", SERIES_HEADER, rows))
    if report.ecm_lagged:
        cols = [c for c in report.ecm_lagged[0] if c != "period"]
        names = "_".join(cols)
        files.append(write_csv(out / f"tv_ecm_{names}.csv", ["period", *cols], report.ecm_lagged))
        files.append(write_csv(out / f"ecm_{names}_by_unit.csv", ["period", "unit_id", *cols],
                               report.ecm_lagged_units))
    lon, lat = panel.centroids[:, 0], panel.centroids[:, 1]
    for (cov, h), le in report.local.items():
        rows = [{"unit_id": uid, "lon": float(lon[i]), "lat": float(lat[i]), "value": float(le.total[i]),
                 "direct": float(le.direct[i]), "indirect": float(le.indirect[i])}
                for i, uid in enumerate(panel.unit_ids)]
        files.append(write_csv(out / f"local_{cov}_{h}.csv", LOCAL_HEADER, rows))
    summary = {
        "region": report.region,
        "total_convention": "mean row sum (direct + (n - 1) * indirect); total_naive = direct + indirect",
        "standard_errors": "not computed (point estimates only)",
        "local_period": report.local_period,
        "time_varying": sorted({f"{c}:{h}" for c, h in report.series}),
        "skipped": report.skipped,
    }
    files.append(write_json(out / "effects_summary.json", summary))
    return files


# --------------------------------------------------------------------------
# Monte Carlo output


def write_monte_carlo(summary, out_dir, prefix: str = "mc") -> list:
    out = Path(out_dir)
    rows = summary.rows
    header = ["parameter"] + [k for k in (rows[0] if rows else {}) if k != "parameter"]
    files = [write_csv(out / f"{prefix}_{summary.experiment}.csv", header, rows)]
    fail_rows = [{"rep": f["rep"], "error": f["error"]} for f in summary.failures]
    files.append(write_csv(out / f"{prefix}_{summary.experiment}_failures.csv", ["rep", "error"], fail_rows))
    return files
