"""Command-line entry point.

Subcommands share ``--seed``, ``--sims``, ``--trace``, ``--workers`` and
``--config``. A TOML config supplies defaults (top-level keys, then a table
named after the subcommand); explicit flags override it. Every output
directory receives one ``manifest.json``.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy

from . import __version__
from .dataio import (
    DataValidationError,
    SyntheticConfig,
    generate_history,
    infer_capacities,
    load_dataset,
    load_history,
    save_history,
    with_capacities,
)
from .domain import DomainError, make_policy
from .features import SPECS, spec_features
from .logit import LogitFit, LogitParams, NumericalError, fit_mle
from .mechanism import Market, deferred_acceptance, write_matching_csv
from .population import PoolTemplate, fit_participation
from .simulation import (
    LogitDemand,
    MixedDemand,
    NaiveDemand,
    SimulationConfig,
    SimulationError,
    SimulationInputs,
    build_report,
    dataset_outcome,
    run_simulation,
    write_report,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("choiceforecast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
MODELS = ("naive", "logit", "mixed")
PATH_OPTIONS = ("out", "data", "history", "fit", "capacities")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "sims": 400,
    "trace": False,
    "workers": None,
    "model": "logit",
    "spec": "reduced",
    "denominator": "ranked",
    "iterations": 50_000,
    "burn_in": None,
    "thin": 1,
    "years": "2010-2013",
    "n_students": 300,
    "n_schools": 10,
    "programs_per_school": 2,
    "program_jitter": 0.3,
    "capacity_scale": 1.0,
    "reference": "self_in",
    "menu": None,
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--sims", type=int, default=None, help="number of simulations")
    p.add_argument("--trace", action="store_true", default=None, help="write sampler traces and debug logs")
    p.add_argument("--workers", type=int, default=None, help="worker processes for simulations")
    p.add_argument("--config", type=Path, default=None, help="TOML file with default options")
    return p


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=MODELS, default=None)
    p.add_argument("--spec", choices=tuple(SPECS), default=None, help="logit feature set")
    p.add_argument("--denominator", choices=("ranked", "full_menu"), default=None)
    p.add_argument("--iterations", type=int, default=None, help="mixed-logit chain length")
    p.add_argument("--burn-in", type=int, default=None, help="mixed-logit burn-in (default: half)")
    p.add_argument("--thin", type=int, default=None)


def _simulation_args(p: argparse.ArgumentParser) -> None:
    _model_args(p)
    p.add_argument("--history", type=Path, required=True, help="directory of yearly dataset directories")
    p.add_argument("--year", type=int, required=True, help="year to predict")
    p.add_argument("--fit", type=Path, default=None, help="fitted model (logit JSON or posterior CSV)")
    p.add_argument("--capacities", type=Path, default=None, help="CSV program_id,capacity overriding inferred seats")
    p.add_argument("--capacity-scale", type=float, default=None, help="multiply every capacity")
    p.add_argument("--reference", choices=("self_in", "leave_one_out"), default=None)
    p.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="choiceforecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic multi-year history")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--years", default=None, help="first-last, e.g. 2010-2013")
    p.add_argument("--n-students", type=int, default=None, help="new applicants per grade in the first year")
    p.add_argument("--n-schools", type=int, default=None)
    p.add_argument("--programs-per-school", type=int, default=None)
    p.add_argument("--program-jitter", type=float, default=None)

    p = sub.add_parser("estimate", parents=[common], help="fit a demand model to one year")
    _model_args(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("forecast-pool", parents=[common], help="fit the participation model")
    p.add_argument("--history", type=Path, required=True)
    p.add_argument("--target-year", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("backtest", parents=[common], help="predict a recorded year and score the prediction")
    _simulation_args(p)

    p = sub.add_parser("forecast", parents=[common], help="predict a future year")
    _simulation_args(p)

    p = sub.add_parser("da-run", parents=[common], help="run deferred acceptance on one dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def resolve_options(args: argparse.Namespace) -> dict[str, Any]:
    """Built-in defaults, then config file, then explicit flags."""
    opts = dict(DEFAULTS)
    if args.config is not None:
        try:
            with args.config.open("rb") as fh:
                cfg = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        section = cfg.get(args.command, {})
        for source in ({k: v for k, v in cfg.items() if not isinstance(v, dict) or k == "menu"}, section):
            for k, v in source.items():
                opts[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command"):
            opts[k] = v
    for k in PATH_OPTIONS:
        if opts.get(k) is not None:
            opts[k] = Path(opts[k])
    opts["command"] = args.command
    return opts


# --------------------------------------------------------------------------
# manifests


def _digest_paths(paths: Sequence[Path]) -> dict[str, str]:
    out = {}
    for root in paths:
        if root is None or not Path(root).exists():
            continue
        files = [root] if Path(root).is_file() else sorted(p for p in Path(root).rglob("*") if p.is_file())
        for f in files:
            if f.name == "manifest.json":
                continue
            out[str(f)] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def _jsonable(v: Any) -> Any:
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(out_dir: Path, opts: dict[str, Any], inputs: Sequence[Path], started: float) -> Path:
    config = {k: _jsonable(v) for k, v in sorted(opts.items()) if k != "out"}
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "command": opts["command"],
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": opts.get("seed"),
        "versions": {
            "choiceforecast": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "inputs": _digest_paths(inputs),
        "timings": {"wall_seconds": round(time.time() - started, 3)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# commands


def default_truth(n_schools: int, spec: str = "reduced") -> LogitParams:
    """Coefficients used to generate synthetic markets."""
    values = {
        "distance": -0.5,
        "continuing": 3.0,
        "sibling": 1.5,
        "ell_match": 1.0,
        "ell_language_match": 0.5,
        "walk_zone": 0.3,
        "distance_x_black_hispanic": 0.1,
        "distance_x_income": -0.05,
        "mcas_x_black": 0.5,
        "mcas_x_income": 0.3,
        "pct_white_asian_x_black_hispanic": -0.3,
        "pct_white_asian_x_income": 0.2,
    }
    names = spec_features(spec)
    width = len(str(n_schools - 1))
    schools = tuple(f"S{s:0{width}d}" for s in range(n_schools))
    beta = np.array([values.get(n, 0.0) for n in names])
    alpha = np.linspace(-0.6, 0.6, n_schools - 1)
    return LogitParams(beta, alpha, names, schools)


def _parse_years(text: str) -> list[int]:
    try:
        first, last = (int(x) for x in str(text).split("-"))
    except ValueError as exc:
        raise UsageError(f"years must look like 2010-2013, got {text!r}") from exc
    if last < first:
        raise UsageError("last year precedes first year")
    return list(range(first, last + 1))


def cmd_gen_synthetic(opts: dict[str, Any]) -> list[Path]:
    years = _parse_years(opts["years"])
    truth = default_truth(opts["n_schools"], opts["spec"])
    config = SyntheticConfig(
        truth,
        n_students=opts["n_students"],
        n_schools=opts["n_schools"],
        programs_per_school=opts["programs_per_school"],
        grades=("K0", "K1", "K2"),
        seed=opts["seed"],
        geography_seed=opts["seed"],
        program_jitter=opts["program_jitter"],
        menu=opts["menu"],
    )
    history = generate_history(config, years)
    save_history(history, opts["out"])
    truth_fit = {
        "feature_names": list(truth.feature_names),
        "school_ids": list(truth.school_ids),
        "beta": truth.beta.tolist(),
        "alpha": truth.alpha.tolist(),
    }
    (opts["out"] / "truth.json").write_text(json.dumps(truth_fit, indent=2) + "\n")
    return []


def _chain_config(opts: dict[str, Any]):
    from .mixedlogit import ChainConfig

    iterations = int(opts["iterations"])
    burn_in = opts["burn_in"] if opts["burn_in"] is not None else iterations // 2
    return ChainConfig(
        iterations=iterations, burn_in=int(burn_in), thin=int(opts["thin"]), seed=opts["seed"], trace=bool(opts["trace"]), init="logit"
    )


def estimate_model(dataset, opts: dict[str, Any], out_dir: Path | None = None):
    """Fit the chosen demand model; writes the fit file when ``out_dir`` is given."""
    model = opts["model"]
    if model == "naive":
        if out_dir is not None:
            (out_dir / "fit.json").write_text(json.dumps({"model": "naive"}, indent=2) + "\n")
        return NaiveDemand()
    if model == "logit":
        fit = fit_mle(dataset, opts["spec"], opts["denominator"])
        if out_dir is not None:
            fit.save(out_dir / "fit.json")
        return LogitDemand(fit)
    from .mixedlogit import MIXED_FEATURES, run_chain, summarize_posterior, summary_json, write_trace

    design = dataset.design(MIXED_FEATURES, opts["denominator"])
    posterior = run_chain(design, _chain_config(opts))
    if out_dir is not None:
        posterior.save(out_dir / "posterior.csv")
        (out_dir / "summary.json").write_text(
            json.dumps(summary_json(summarize_posterior(posterior), posterior), indent=2) + "\n"
        )
        if opts["trace"] and "trace" in posterior.diagnostics:
            write_trace(posterior.diagnostics["trace"], out_dir / "trace.csv")
    return MixedDemand(posterior)


def load_demand(path: Path):
    """Demand model from a fit file written by ``estimate``."""
    if path.suffix == ".csv":
        from .mixedlogit import Posterior

        return MixedDemand(Posterior.read_csv(path))
    data = json.loads(path.read_text())
    if data.get("model") == "naive":
        return NaiveDemand()
    return LogitDemand(LogitFit.from_dict(data))


def cmd_estimate(opts: dict[str, Any]) -> list[Path]:
    dataset = load_dataset(opts["data"], policy=make_policy(opts["menu"]) if opts["menu"] else None)
    estimate_model(dataset, opts, opts["out"])
    return [opts["data"]]


def cmd_forecast_pool(opts: dict[str, Any]) -> list[Path]:
    history = load_history(opts["history"])
    usable = {y: d for y, d in history.items() if y < opts["target_year"]}
    model = fit_participation(usable, opts["target_year"])
    model.save(opts["out"] / "participation.json")
    return [opts["history"]]


def _read_capacities(path: Path) -> dict[str, int]:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return {r["program_id"]: int(r["capacity"]) for r in rows}
    except (KeyError, ValueError) as exc:
        raise DataValidationError(f"{path}: need program_id,capacity columns with integer capacities") from exc


def simulation_inputs(opts: dict[str, Any], history: dict[int, Any], out_dir: Path | None):
    """Demand model, participation model and capacities for predicting ``year``.

    Capacities default to those inferred from the previous year's
    assignments; ``--capacities`` overrides them and ``--capacity-scale``
    rescales the result.
    """
    year = opts["year"]
    base_year = year - 1
    if base_year not in history:
        raise DataValidationError(f"history has no data for base year {base_year}")
    usable = {y: d for y, d in history.items() if y < year}
    base = history[base_year]
    participation = fit_participation(usable, year)
    demand = load_demand(opts["fit"]) if opts.get("fit") else estimate_model(base, opts, out_dir)
    if opts.get("capacities"):
        capacity = _read_capacities(opts["capacities"])
    elif base.assignments is not None:
        capacity = infer_capacities(base.assignments, base.programs)
    else:
        capacity = {p.program_id: p.capacity for p in base.programs}
    scale = float(opts["capacity_scale"])
    capacity = {k: int(round(v * scale)) for k, v in capacity.items()}
    programs = with_capacities(base.programs, capacity)
    policy = make_policy(opts["menu"])
    if out_dir is not None:
        participation.save(out_dir / "participation.json")
    return SimulationInputs(demand, participation, PoolTemplate.from_dataset(base), programs, policy, base.distance)


def _simulate(opts: dict[str, Any], with_actual: bool) -> list[Path]:
    if opts["sims"] < 2:
        raise UsageError("at least 2 simulations are needed to form confidence intervals")
    history = load_history(opts["history"])
    actual = None
    if with_actual:
        if opts["year"] not in history:
            raise DataValidationError(f"history has no actual data for {opts['year']}")
        actual = dataset_outcome(history[opts["year"]])
    inputs = simulation_inputs(opts, history, opts["out"])
    config = SimulationConfig(opts["sims"], opts["seed"], opts["workers"], opts["reference"])
    outcomes = run_simulation(config, inputs)
    write_report(build_report(outcomes, actual, opts["reference"]), opts["out"])
    return [opts["history"]] + ([opts["fit"]] if opts.get("fit") else []) + (
        [opts["capacities"]] if opts.get("capacities") else []
    )


def cmd_backtest(opts: dict[str, Any]) -> list[Path]:
    return _simulate(opts, with_actual=True)


def cmd_forecast(opts: dict[str, Any]) -> list[Path]:
    return _simulate(opts, with_actual=False)


def cmd_da_run(opts: dict[str, Any]) -> list[Path]:
    dataset = load_dataset(opts["data"])
    matching = deferred_acceptance(Market(dataset.students, dataset.programs, dataset.observed_rankings))
    write_matching_csv(matching, opts["out"] / "matching.csv")
    return [opts["data"]]


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "estimate": cmd_estimate,
    "forecast-pool": cmd_forecast_pool,
    "backtest": cmd_backtest,
    "forecast": cmd_forecast,
    "da-run": cmd_da_run,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, SimulationError):
        return _exit_code(exc.cause)
    if isinstance(exc, (NumericalError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (DomainError, ValueError, OSError)):
        return EXIT_DATA
    return EXIT_NUMERICAL


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.time()
    try:
        opts = resolve_options(args)
        if opts["model"] not in MODELS:
            raise UsageError(f"unknown model {opts['model']!r}; choose from {MODELS}")
        if opts["workers"] is None or opts["workers"] < 1:
            opts["workers"] = os.cpu_count() or 1
        logging.basicConfig(level=logging.DEBUG if opts["trace"] else logging.WARNING, format="%(levelname)s %(message)s")
        out_dir = Path(opts["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](opts)
        write_manifest(out_dir, opts, inputs, started)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = _exit_code(exc)
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("failure", exc_info=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
