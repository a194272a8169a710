"""Command-line entry point: estimate, simulate, rates, tune, backtest.

Each command reads an optional JSON config, overlays command-line flags,
materializes every default into the output and writes CSV/JSON under --out.
Errors exit nonzero with a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .functionals import (
    SingularCovarianceError,
    fit_debiased,
    theta_benchmark_P,
    theta_block,
    theta_gaussian_dense,
    theta_l0,
    theta_plugin_family,
    theta_subgaussian_dense,
    theta_support_recovery,
    theta_two_sample,
)
from .io import ParseError, read_dataset_csv, read_returns_csv, write_json
from .moments import DataError, TruncationConfig, sample_moments, truncated_moments
from .portfolio import BacktestConfig, run_backtest
from .simulation import (
    DEFAULT_ESTIMATORS,
    SETTINGS,
    SimulationAborted,
    fit_rate_slope,
    make_setting,
    run_scenario,
    table_points,
)
from .solver import QuadProblem, SolverConfig, SolverError, solve_dantzig, solve_l1
from .tuning import CvConfig, OracleContext, cv_tune, theory_lambda_gamma

log = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ESTIMATOR = 4

CLI_ESTIMATORS = ("debiased", "plugin", "l0", "dantzig", "benchmark_P", "gaussian_dense", "subgaussian_dense",
                  "block", "support_recovery", "two_sample")

SOLVER_DEFAULTS = {"max_iter": 50_000, "tol": 1e-8, "mcp_concavity": None}
TUNING_DEFAULTS = {
    "mode": "theory",
    "lambda": None,
    "gamma": None,
    "tau": 1.0,
    "s": 1,
    "nu": 1.0,
    "c_L": 1.0,
    "c_U": 1.0,
    "t": 1.0,
    "folds": 5,
    "n_lambda": 30,
    "lambda_grid": [],
    "gamma_grid": [],
}

DEFAULTS = {
    "estimate": {
        "input": None,
        "input2": None,
        "header": False,
        "estimators": ["debiased"],
        "moments": "sample",
        "truncation": {"mean_level": 1.0, "cov_confidence": 0.05},
        "tuning": TUNING_DEFAULTS,
        "solver": SOLVER_DEFAULTS,
        "c": 1.0,
        "l0_s": 1,
        "dense": {"alpha_exponent": None, "eps": None},
        "blocks": None,
    },
    "simulate": {
        "setting": "s1",
        "reps": 100,
        "full": False,
        "n_grid": None,
        "estimators": list(DEFAULT_ESTIMATORS),
        "tuning": "oracle",
        "n_lambda": 30,
        "cv_folds": 5,
        "max_fail_frac": 0.01,
    },
    "tune": {
        "input": None,
        "header": False,
        "folds": 5,
        "n_lambda": 30,
        "lambda_grid": [],
        "gamma_grid": [],
        "solver": {"max_iter": 50_000, "tol": 1e-8},
    },
    "backtest": {
        "input": None,
        "train_periods": 21,
        "validate_periods": 3,
        "test_periods": 1,
        "sigma": 0.05,
        "rebalance": None,
        "periods_per_year": 12,
        "lambda_grid": [],
        "gamma_grid": [],
        "n_lambda": 10,
    },
}
DEFAULTS["rates"] = dict(DEFAULTS["simulate"], fits=None)


class ConfigError(ValueError):
    pass


class EstimatorError(RuntimeError):
    def __init__(self, message: str, failures: list):
        super().__init__(message)
        self.failures = failures


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}; valid: {', '.join(sorted(base))}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(command: str, path: str | None, overrides: dict) -> dict:
    """Defaults, then the JSON file at ``path``, then non-None ``overrides``."""
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    base = dict(DEFAULTS[command], seed=0, threads=1)
    cfg = _merge(base, user)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _require_input(cfg: dict, key: str = "input") -> str:
    path = cfg.get(key)
    if not path:
        raise ConfigError(f"config key {key!r} is required")
    if not Path(path).is_file():
        raise ConfigError(f"input file not found: {path}")
    return path


# --- estimate -----------------------------------------------------------------


def _solver_config(x, cfg: dict) -> SolverConfig:
    tun = cfg["tuning"]
    sol = cfg["solver"]
    n, p = x.shape
    mode = tun["mode"]
    if mode == "fixed":
        if tun["lambda"] is None or tun["gamma"] is None:
            raise ConfigError("tuning mode 'fixed' needs tuning.lambda and tuning.gamma")
        lam, gam = float(tun["lambda"]), float(tun["gamma"])
    elif mode == "theory":
        ctx = OracleContext(tau=float(tun["tau"]), s=int(tun["s"]), nu=float(tun["nu"]),
                            c_L=float(tun["c_L"]), c_U=float(tun["c_U"]))
        tt = theory_lambda_gamma(ctx, n, max(p, 2), t=float(tun["t"]))
        if tt.degenerate:
            raise ConfigError("theory tuning gives gamma = 0 (tau = 0); set tuning.tau > 0")
        lam = tt.lam if tun["lambda"] is None else float(tun["lambda"])
        gam = tt.gamma if tun["gamma"] is None else float(tun["gamma"])
    elif mode == "cv":
        res = cv_tune(x, CvConfig(folds=int(tun["folds"]), lambda_grid=tuple(tun["lambda_grid"]),
                                  gamma_grid=tuple(tun["gamma_grid"]), seed=int(cfg["seed"]),
                                  n_lambda=int(tun["n_lambda"])),
                      max_iter=int(sol["max_iter"]), tol=float(sol["tol"]))
        lam, gam = res.lam, res.gamma
    else:
        raise ConfigError(f"unknown tuning mode {mode!r}; valid: fixed, theory, cv")
    return SolverConfig(lam, gam, max_iter=int(sol["max_iter"]), tol=float(sol["tol"]),
                        mcp_concavity=sol["mcp_concavity"])


def _run_estimator(name: str, x, x2, cfg: dict):
    if cfg["moments"] == "sample":
        m = sample_moments(x)
    elif cfg["moments"] == "truncated":
        tr = cfg["truncation"]
        m = truncated_moments(x, TruncationConfig(mean_level=float(tr["mean_level"]),
                                                  cov_confidence=float(tr["cov_confidence"])))
    else:
        raise ConfigError(f"unknown moments {cfg['moments']!r}; valid: sample, truncated")
    n = x.shape[0]
    if name == "benchmark_P":
        return theta_benchmark_P(m, n)
    if name == "gaussian_dense":
        return theta_gaussian_dense(x)
    if name == "subgaussian_dense":
        return theta_subgaussian_dense(x, cfg["dense"]["alpha_exponent"], cfg["dense"]["eps"])
    if name == "block":
        if cfg["blocks"] is None:
            raise ConfigError("estimator 'block' needs config key 'blocks'")
        return theta_block(x, cfg["blocks"])
    sc = _solver_config(x, cfg)
    if name == "debiased":
        est, _ = fit_debiased(m, sc)
        return est
    if name == "plugin":
        sol = solve_l1(QuadProblem.from_moments(m), sc)
        return theta_plugin_family(m, sol, float(cfg["c"]), tuning=sc.as_dict())
    if name == "l0":
        return theta_l0(m, int(cfg["l0_s"]), sc.gamma)
    if name == "dantzig":
        sol = solve_dantzig(QuadProblem.from_moments(m), sc.lam, tol=sc.tol)
        return theta_plugin_family(m, sol, 2.0, estimator_id="dantzig", tuning={"lam": sc.lam})
    if name == "support_recovery":
        return theta_support_recovery(x, sc)
    if name == "two_sample":
        if x2 is None:
            raise ConfigError("estimator 'two_sample' needs config key 'input2'")
        return theta_two_sample(x, x2, sc)
    raise ConfigError(f"unknown estimator {name!r}; valid: {', '.join(CLI_ESTIMATORS)}")


def cmd_estimate(cfg: dict, out: Path) -> dict:
    x = read_dataset_csv(_require_input(cfg), header=bool(cfg["header"]))
    x2 = read_dataset_csv(_require_input(cfg, "input2"), header=bool(cfg["header"])) if cfg["input2"] else None
    unknown = [e for e in cfg["estimators"] if e not in CLI_ESTIMATORS]
    if unknown:
        raise ConfigError(f"unknown estimators {unknown}; valid: {', '.join(CLI_ESTIMATORS)}")
    estimates, failures = [], []
    for name in cfg["estimators"]:
        try:
            estimates.append(_run_estimator(name, x, x2, cfg).as_dict())
        except ConfigError:
            raise
        except (DataError, SolverError, SingularCovarianceError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
            failures.append({"estimator": name, "error": type(exc).__name__, "message": str(exc)})
    doc = {"version": __version__, "config": cfg, "estimates": estimates, "failures": failures}
    write_json(doc, out / "estimate.json")
    if failures:
        raise EstimatorError(f"{len(failures)} estimator(s) failed", failures)
    return doc


# --- simulate / rates -----------------------------------------------------------


def _scenario(cfg: dict):
    if cfg["setting"] not in SETTINGS:
        raise ConfigError(f"unknown setting {cfg['setting']!r}; valid: {', '.join(sorted(SETTINGS))}")
    over = {"tuning": cfg["tuning"], "n_lambda": int(cfg["n_lambda"]), "cv_folds": int(cfg["cv_folds"])}
    if cfg["n_grid"]:
        over["n_grid"] = tuple(int(v) for v in cfg["n_grid"])
    return make_setting(cfg["setting"], reps=int(cfg["reps"]), seed=int(cfg["seed"]), full=bool(cfg["full"]), **over)


def _simulate(cfg: dict, out: Path):
    sc = _scenario(cfg)
    try:
        res = run_scenario(sc, cfg["estimators"], threads=int(cfg["threads"]),
                           max_fail_frac=float(cfg["max_fail_frac"]))
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    res.write_csv(out / "result.csv")
    return res


def cmd_simulate(cfg: dict, out: Path) -> dict:
    res = _simulate(cfg, out)
    doc = {"version": __version__, "config": cfg, "table": res.table}
    write_json(doc, out / "simulate.json")
    return doc


def cmd_rates(cfg: dict, out: Path) -> dict:
    res = _simulate(cfg, out)
    fits = cfg["fits"]
    if fits is None:
        fits = [{"estimator": e, "column": c, "model": mdl}
                for e in cfg["estimators"] if e != "zero"
                for c in ("mean_theta_err", "mean_alpha_err2")
                for mdl in ("linear", "logcorrected")]
        cfg["fits"] = fits
    rows = []
    for f in fits:
        try:
            rf = fit_rate_slope(table_points(res.table, f["estimator"], f["column"]), f["model"])
            rows.append(dict(f, slope=rf.slope, intercept=rf.intercept, r2=rf.r2, dropped=list(rf.dropped)))
        except ValueError as exc:
            rows.append(dict(f, slope=None, intercept=None, r2=None, dropped=[], error=str(exc)))
    with open(out / "rates.csv", "w") as fh:
        fh.write("estimator,column,model,slope,intercept,r2\n")
        for r in rows:
            vals = ["" if r[k] is None else f"{r[k]:.17g}" for k in ("slope", "intercept", "r2")]
            fh.write(f"{r['estimator']},{r['column']},{r['model']},{','.join(vals)}\n")
    doc = {"version": __version__, "config": cfg, "table": res.table, "fits": rows}
    write_json(doc, out / "rates.json")
    return doc


# --- tune -----------------------------------------------------------------------


def cmd_tune(cfg: dict, out: Path) -> dict:
    x = read_dataset_csv(_require_input(cfg), header=bool(cfg["header"]))
    res = cv_tune(x, CvConfig(folds=int(cfg["folds"]), lambda_grid=tuple(cfg["lambda_grid"]),
                              gamma_grid=tuple(cfg["gamma_grid"]), seed=int(cfg["seed"]),
                              n_lambda=int(cfg["n_lambda"])),
                  max_iter=int(cfg["solver"]["max_iter"]), tol=float(cfg["solver"]["tol"]))
    res.write_csv(out / "cv_table.csv")
    doc = {"version": __version__, "config": cfg, "lambda": res.lam, "gamma": res.gamma}
    write_json(doc, out / "tune.json")
    return doc


# --- backtest -------------------------------------------------------------------


def cmd_backtest(cfg: dict, out: Path) -> dict:
    table = read_returns_csv(_require_input(cfg))
    try:
        bc = BacktestConfig(train_periods=int(cfg["train_periods"]), validate_periods=int(cfg["validate_periods"]),
                            test_periods=int(cfg["test_periods"]), sigma_target=float(cfg["sigma"]),
                            rebalance=None if cfg["rebalance"] is None else int(cfg["rebalance"]),
                            periods_per_year=int(cfg["periods_per_year"]), lambda_grid=tuple(cfg["lambda_grid"]),
                            gamma_grid=tuple(cfg["gamma_grid"]), n_lambda=int(cfg["n_lambda"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rep = run_backtest(table, bc)
    rep.write_csv(out / "report.csv")
    doc = {
        "version": __version__,
        "config": cfg,
        "metrics": rep.metrics.as_dict(),
        "windows": [vars(w) for w in rep.windows],
    }
    write_json(doc, out / "metrics.json")
    return doc


HELP = {
    "estimate": "estimate theta from a dataset CSV",
    "simulate": "run a Monte Carlo scenario and write its error table",
    "rates": "simulate and fit log-log rate slopes",
    "tune": "cross-validate lambda and gamma on a dataset CSV",
    "backtest": "rolling market-hedged portfolio backtest on a returns CSV",
}

COMMANDS = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "rates": cmd_rates,
    "tune": cmd_tune,
    "backtest": cmd_backtest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config document")
    common.add_argument("--seed", type=int, metavar="U64", help="base seed (overrides config)")
    common.add_argument("--threads", type=int, metavar="N", help="worker processes (overrides config)")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="mvfunctional", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "backtest":
            p.add_argument("--sigma", type=float, help="target risk level")
            p.add_argument("--train", type=int, dest="train_periods", help="training window length")
            p.add_argument("--validate", type=int, dest="validate_periods", help="validation window length")
            p.add_argument("--test", type=int, dest="test_periods", help="test window length")
            p.add_argument("--rebalance", type=int, help="step between rebalances")
        if name in ("simulate", "rates"):
            p.add_argument("--setting", help=f"one of {', '.join(sorted(SETTINGS))}")
            p.add_argument("--reps", type=int)
    return parser


def _fail(exc: Exception, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ParseError):
        err.update(row=exc.row, column=exc.column)
    if isinstance(exc, EstimatorError):
        err["failures"] = exc.failures
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _fail(exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    skip = {"command", "config", "out", "verbose"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    try:
        cfg = load_config(args.command, args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        return _fail(exc, EXIT_USAGE)
    except (DataError, SingularCovarianceError) as exc:
        return _fail(exc, EXIT_DATA)
    except (EstimatorError, SimulationAborted, SolverError, RuntimeError) as exc:
        return _fail(exc, EXIT_ESTIMATOR)
    return 0


if __name__ == "__main__":
    sys.exit(main())
