"""Command-line front end: ``sdpd {validate,fit,effects,test,simulate}``.

Every command reads a YAML run config (``--config``), writes its outputs to
``--out`` (or the config's ``out``) and leaves ``run_manifest_<command>.json``
recording the resolved config, its hash, the seed and the tool version.  A
manifest can be passed back as ``--config`` to repeat the run exactly.

Exit codes: 0 success, 1 runtime or estimation failure, 2 configuration or
validation failure.  Failures also write ``error.json`` to the output
directory when one is known.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import report
from .effects import effects_report
from .errors import SDPDError, ValidationError
from .estimator import FitResult, fit, wald_cointegration_test
from .panel import ModelSpec, load_schema, panel_schema, read_panel, write_panel
from .simulate import EXPERIMENTS, DGPConfig, monte_carlo, simulate
from .weights import build_knn_weights

log = logging.getLogger("sdpd")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
COMMANDS = ("validate", "fit", "effects", "test", "simulate")
CONFIG_KEYS = ("data", "schema", "model", "region", "countries", "out", "seed", "fit", "test", "simulate")
FIT_OPTIONS = ("n_starts", "logdet_method", "grid_size")
HELP = {
    "validate": "check the config and data without fitting",
    "fit": "estimate the model and write coefficient tables",
    "effects": "compute marginal effects from a fit",
    "test": "Wald test of rho + phi + gamma = 1",
    "simulate": "simulate panels and run Monte Carlo experiments",
}


@dataclass
class RunConfig:
    """Resolved run configuration; paths are absolute."""

    data: Path | None = None
    schema: Path | None = None
    model: dict = field(default_factory=dict)
    region: str = "all"
    countries: list | None = None
    out: Path = Path("sdpd_out")
    seed: int = 0
    fit: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    simulate: dict | None = None

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("run config must be a mapping")
        extra = set(d) - set(CONFIG_KEYS)
        if extra:
            raise ValidationError("unknown config key(s): " + ", ".join(sorted(extra)))

        def path(key):
            v = d.get(key)
            return None if v is None else (base / str(v)).resolve()

        fit_opts = dict(d.get("fit") or {})
        bad = set(fit_opts) - set(FIT_OPTIONS)
        if bad:
            raise ValidationError("unknown fit option(s): " + ", ".join(sorted(bad)))
        countries = d.get("countries")
        return cls(
            data=path("data"),
            schema=path("schema"),
            model=dict(d.get("model") or {}),
            region=str(d.get("region", "all")),
            countries=None if countries is None else [str(c) for c in countries],
            out=path("out") or Path("sdpd_out").resolve(),
            seed=int(d.get("seed", 0)),
            fit=fit_opts,
            test=dict(d.get("test") or {}),
            simulate=d.get("simulate"),
        )

    def to_dict(self) -> dict:
        """Config as recorded in manifests; the output directory is excluded."""
        d = {
            "data": None if self.data is None else str(self.data),
            "schema": None if self.schema is None else str(self.schema),
            "model": self.model,
            "region": self.region,
            "countries": self.countries,
            "seed": self.seed,
            "fit": self.fit,
            "test": self.test,
            "simulate": self.simulate,
        }
        return {k: v for k, v in d.items() if v is not None}

    def model_spec(self) -> ModelSpec:
        try:
            return ModelSpec.from_dict(self.model)
        except TypeError as exc:
            raise ValidationError(f"bad model section: {exc}") from exc


def load_config(path) -> tuple:
    """Read a YAML run config or a previous run's manifest.

    Returns ``(config, command)`` where ``command`` is set for manifests.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse {path}: {exc}") from exc
    if isinstance(d, dict) and d.get("tool") == "sdpd" and "config" in d:
        return RunConfig.from_dict(d["config"], path.parent), d.get("command")
    return RunConfig.from_dict(d, path.parent), None


def config_hash(d: dict) -> str:
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, command: str, files) -> Path:
    d = cfg.to_dict()
    manifest = {
        "tool": "sdpd",
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "config_sha256": config_hash(d),
        "config": d,
        "outputs": {p.name: _sha256(p) for p in sorted(files, key=lambda p: p.name)},
    }
    return report.write_json(cfg.out / f"run_manifest_{command}.json", manifest)


# --------------------------------------------------------------------------
# shared steps


def _load_panel(cfg: RunConfig):
    if cfg.data is None or cfg.schema is None:
        raise ValidationError("config must name both 'data' and 'schema'")
    for p in (cfg.data, cfg.schema):
        if not p.is_file():
            raise ValidationError(f"file not found: {p}")
    panel = read_panel(cfg.data, load_schema(cfg.schema))
    if cfg.countries:
        panel = panel.select_countries(cfg.countries)
    return panel


def _weights(panel, spec: ModelSpec):
    return build_knn_weights(panel.centroids, spec.k_neighbors, spec.distance)


def _prepare_out(cfg: RunConfig) -> None:
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {cfg.out}: {exc}") from exc


def _fit_path(cfg: RunConfig, arg) -> Path:
    p = Path(arg).resolve() if arg else cfg.out / "fit.json"
    if not p.is_file():
        raise ValidationError(f"fit file not found: {p}")
    return p


def _load_fit(path: Path) -> FitResult:
    try:
        return FitResult.from_json(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"cannot read fit file {path}: {exc}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_validate(cfg: RunConfig, args) -> list:
    panel = _load_panel(cfg)
    spec = cfg.model_spec()
    spec.validate(panel)
    _weights(panel, spec)
    summary = {
        "status": "ok",
        "n_units": panel.n,
        "n_periods": panel.T,
        "first_period": panel.period_ids[0],
        "last_period": panel.period_ids[-1],
        "dependent": panel.y_name,
        "columns": list(panel.X),
        "countries": sorted(set(panel.country_of_unit)),
        "model": spec.to_dict(),
    }
    return [report.write_json(cfg.out / "validation.json", summary)]


def cmd_fit(cfg: RunConfig, args) -> list:
    panel = _load_panel(cfg)
    spec = cfg.model_spec()
    spec.validate(panel)
    W = _weights(panel, spec)
    res = fit(panel, W, spec, seed=cfg.seed, **cfg.fit)
    title = f"QMLE estimates, region {cfg.region}"
    return report.write_fit(res, cfg.out, title)


def cmd_effects(cfg: RunConfig, args) -> list:
    res = _load_fit(_fit_path(cfg, args.fit))
    panel = _load_panel(cfg)
    res.spec.validate(panel)
    W = _weights(panel, res.spec)
    rep = effects_report(res, W, panel, cfg.region)
    for s in rep.skipped:
        log.warning("skipped %s: %s", s["output"], s["reason"])
    return report.write_effects(rep, panel, cfg.out)


def cmd_test(cfg: RunConfig, args) -> list:
    res = _load_fit(_fit_path(cfg, args.fit))
    alpha = float(args.alpha if args.alpha is not None else cfg.test.get("alpha", 0.05))
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    return [report.write_stability(wald_cointegration_test(res, alpha), cfg.out)]


def cmd_simulate(cfg: RunConfig, args) -> list:
    sim = cfg.simulate
    if not isinstance(sim, dict):
        raise ValidationError("config needs a 'simulate' section")
    extra = set(sim) - {"dgp", "write_panel", "monte_carlo"}
    if extra:
        raise ValidationError("unknown simulate key(s): " + ", ".join(sorted(extra)))
    dgp = dict(sim.get("dgp") or {})
    if "seed" in dgp:
        raise ValidationError("set the seed at the top level of the config, not under simulate.dgp")
    dgp["seed"] = cfg.seed
    config = DGPConfig.from_dict(dgp)
    spec = config.model_spec(**{k: v for k, v in cfg.model.items() if k not in ("covariates", "covariate_names")})
    files = []
    if sim.get("write_panel", True):
        panel = simulate(config)
        write_panel(panel, cfg.out / "panel.csv")
        schema = panel_schema(panel)
        (cfg.out / "schema.yaml").write_text(yaml.safe_dump(schema.to_dict(), sort_keys=False))
        fit_cfg = {"data": "panel.csv", "schema": "schema.yaml", "model": spec.to_dict(),
                   "region": "simulated", "seed": cfg.seed}
        (cfg.out / "fit_config.yaml").write_text(yaml.safe_dump(fit_cfg, sort_keys=False))
        files += [cfg.out / "panel.csv", cfg.out / "schema.yaml", cfg.out / "fit_config.yaml"]
    mc = sim.get("monte_carlo")
    if mc:
        mc = dict(mc)
        n_reps = int(mc.pop("n_reps", 100))
        experiments = mc.pop("experiments", ["bias"])
        alpha = float(mc.pop("alpha", 0.05))
        if mc:
            raise ValidationError("unknown monte_carlo key(s): " + ", ".join(sorted(mc)))
        for exp in experiments:
            if exp not in EXPERIMENTS:
                raise ValidationError(f"unknown experiment {exp!r}; choose from {EXPERIMENTS}")
        for exp in experiments:
            summary = monte_carlo(config, n_reps, exp, spec=spec, alpha=alpha,
                                  threads=args.threads, **cfg.fit)
            files += report.write_monte_carlo(summary, cfg.out)
    return files


HANDLERS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "effects": cmd_effects,
    "test": cmd_test,
    "simulate": cmd_simulate,
}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdpd", description="Spatial dynamic panel QMLE, cointegration test and effects.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=HELP[name])
        s.add_argument("--config", required=name != "test", help="YAML run config or run manifest")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="random seed (overrides the config)")
        s.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo")
        if name in ("effects", "test"):
            s.add_argument("--fit", help="fit.json from a previous fit run (default: OUT/fit.json)")
        if name == "test":
            s.add_argument("--alpha", type=float, help="test level (default 0.05)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_record(exc, code) -> dict:
    rec = {"status": "error", "exit_code": code, "error_type": type(exc).__name__, "message": str(exc)}
    if hasattr(exc, "covariates"):
        rec["covariates"] = list(exc.covariates)
    return rec


def _exit_code(exc) -> int:
    if isinstance(exc, ValidationError):
        return EXIT_INVALID
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    out_dir = Path(args.out).resolve() if args.out else None
    try:
        if args.config:
            cfg, recorded = load_config(args.config)
            if recorded is not None and recorded != args.command:
                raise ValidationError(f"manifest records command {recorded!r}, not {args.command!r}")
        else:
            cfg = RunConfig()
        if out_dir is not None:
            cfg.out = out_dir
        out_dir = cfg.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        _prepare_out(cfg)
        files = HANDLERS[args.command](cfg, args)
        files.append(write_manifest(cfg, args.command, files))
        stale = cfg.out / "error.json"
        if stale.exists():
            stale.unlink()
    except (SDPDError, ArithmeticError, np.linalg.LinAlgError, OSError, RuntimeError) as exc:
        code = _exit_code(exc)
        print(f"sdpd {args.command}: error: {exc}", file=sys.stderr)
        if out_dir is not None and out_dir.is_dir():
            report.write_json(out_dir / "error.json", _error_record(exc, code))
        return code
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
