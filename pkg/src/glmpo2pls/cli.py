"""Command-line surface.

Subcommands: fit, predict, test, simulate, scree.  Exit codes: 0 success,
2 clean non-convergence (fit only; the model file is still written), 64
usage errors, 66 file or input-data errors, 70 numerical aborts.  All
error output is a single structured line on standard error.

Environment overrides: GLMPO2PLS_SEED supplies a default whenever --seed
is not given, GLMPO2PLS_THREADS the default worker count for simulate.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .em_binary import DEFAULT_QUAD_NODES, fit_binary
from .em_gaussian import FitConfig, fit_gaussian
from .errors import DataFormatError, DimensionMismatchError, GlmPo2plsError
from .inference import (
    fit_from_theta,
    louis_information_alpha,
    test_componentwise,
    test_full,
)
from .io import (
    ingest,
    load_model,
    read_matrix_csv,
    read_outcome_csv,
    save_model,
    scree_table,
    write_predictions_csv,
    write_tests_csv,
)
from .model import BERNOULLI, GAUSSIAN, DataSet, ModelDims, predict_linear_predictor
from .simbench import SimSetting, run_study

EXIT_OK = 0
EXIT_NONCONVERGENCE = 2
EXIT_USAGE = 64
EXIT_FILE = 66
EXIT_NUMERIC = 70

ENV_SEED = "GLMPO2PLS_SEED"
ENV_THREADS = "GLMPO2PLS_THREADS"

_PROG = "glmpo2pls"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse parser whose errors surface as catchable exceptions so the
    process can exit 64 with a single-line message."""

    def error(self, message):
        raise _UsageError(message)


def _env_int(name: str):
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise _UsageError(f"{name} must be an integer, got {raw!r}") from None


def _resolve_seed(cli_value):
    return cli_value if cli_value is not None else _env_int(ENV_SEED)


def build_parser() -> _Parser:
    parser = _Parser(prog=_PROG, description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("fit", help="estimate the model from CSV data")
    p.add_argument("--x", required=True, help="feature matrix CSV (first block)")
    p.add_argument("--y", required=True, help="feature matrix CSV (second block)")
    p.add_argument("--z", required=True, help="single-column outcome CSV")
    p.add_argument("--family", required=True, choices=[GAUSSIAN, BERNOULLI])
    p.add_argument("--r", required=True, type=int, help="number of joint components")
    p.add_argument("--rx", required=True, type=int,
                   help="number of x-specific components")
    p.add_argument("--ry", required=True, type=int,
                   help="number of y-specific components")
    p.add_argument("--quad-nodes", type=int, default=None,
                   help=f"quadrature nodes per latent dimension "
                        f"(bernoulli only, default {DEFAULT_QUAD_NODES})")
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6,
                   help="relative log-likelihood convergence tolerance")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="model JSON path to write")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="linear predictors for new rows")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("test", help="chi-square association tests")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--z", required=True)
    p.add_argument("--out", required=True, help="test-results CSV path")
    p.set_defaults(func=_cmd_test)

    p = sub.add_parser("simulate", help="run the synthetic study")
    p.add_argument("--config", required=True,
                   help="JSON study config: a setting object, a list of "
                        "them, or {settings: [...], master_seed, workers, "
                        "quad_nodes}")
    p.add_argument("--out", required=True, help="long-format report CSV path")
    p.add_argument("--threads", type=int, default=None,
                   help="parallel replication workers")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("scree", help="spectra of X'Y, X'X, Y'Y as CSV on stdout")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--k", required=True, type=int, help="components to print")
    p.set_defaults(func=_cmd_scree)
    return parser


def _cmd_fit(ns) -> int:
    result = ingest(ns.x, ns.y, ns.z, ns.family, center=True)
    data = result.data
    dims = ModelDims(p=data.p, q=data.q, r=ns.r, r_x=ns.rx, r_y=ns.ry, N=data.N)
    seed = _resolve_seed(ns.seed)
    config = FitConfig(max_iter=ns.max_iter, rel_tol=ns.tol, seed=seed)
    quad_nodes = ns.quad_nodes if ns.quad_nodes is not None else DEFAULT_QUAD_NODES
    if ns.family == GAUSSIAN:
        fit = fit_gaussian(data, dims, config)
    else:
        fit = fit_binary(data, dims, config, M=quad_nodes)
    meta = {
        "iterations": fit.iterations,
        "final_loglik": float(fit.loglik_trace[-1]),
        "converged": fit.converged,
        "config": {
            "family": ns.family, "r": ns.r, "r_x": ns.rx, "r_y": ns.ry,
            "max_iter": ns.max_iter, "tol": ns.tol, "seed": seed,
            "init_strategy": config.init_strategy,
        },
    }
    if ns.family == BERNOULLI:
        meta["config"]["quad_nodes"] = quad_nodes
        meta["beta_step_warning"] = fit.beta_step_warning
    save_model(ns.out, fit.theta, dims, x_center=result.x_center,
               y_center=result.y_center, z_center=result.z_center,
               fit_meta=meta)
    print(f"model written to {ns.out}: converged={fit.converged} "
          f"iterations={fit.iterations} loglik={float(fit.loglik_trace[-1])!r}")
    if not fit.converged:
        print(f"{_PROG}: fit: did not converge within {ns.max_iter} "
              f"iterations (model written anyway)", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _check_feature_shapes(model, X, Y):
    if X.shape[1] != model.dims.p or Y.shape[1] != model.dims.q:
        raise DimensionMismatchError(
            f"data has (p, q) = ({X.shape[1]}, {Y.shape[1]}); model expects "
            f"({model.dims.p}, {model.dims.q})")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatchError(
            f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")


def _cmd_predict(ns) -> int:
    model = load_model(ns.model)
    _, X = read_matrix_csv(ns.x)
    _, Y = read_matrix_csv(ns.y)
    _check_feature_shapes(model, X, Y)
    lin = predict_linear_predictor(model.theta, X - model.x_center,
                                   Y - model.y_center)
    write_predictions_csv(ns.out, lin, model.theta.family,
                          z_center=model.z_center)
    print(f"predictions written to {ns.out} ({lin.shape[0]} rows)")
    return EXIT_OK


def _cmd_test(ns) -> int:
    model = load_model(ns.model)
    _, X = read_matrix_csv(ns.x)
    _, Y = read_matrix_csv(ns.y)
    _check_feature_shapes(model, X, Y)
    _, z = read_outcome_csv(ns.z)
    family = model.theta.family
    if family == GAUSSIAN:
        z = z - model.z_center
    data = DataSet(X=X - model.x_center, Y=Y - model.y_center, z=z,
                   family=family)
    fit = fit_from_theta(model.theta, data)
    quad_nodes = model.fit_meta.get("config", {}).get(
        "quad_nodes", DEFAULT_QUAD_NODES)
    info = louis_information_alpha(fit, data, M=quad_nodes)
    results = [test_full(fit, info)]
    for k in range(1, model.dims.r + 1):
        results.append(test_componentwise(fit, info, k))
    write_tests_csv(ns.out, results)
    print(f"test results written to {ns.out} ({len(results)} rows)")
    return EXIT_OK


def _load_study_config(path: str):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    extras = {}
    if isinstance(obj, dict) and "settings" in obj:
        raw_settings = obj["settings"]
        extras = {k: v for k, v in obj.items() if k != "settings"}
    elif isinstance(obj, list):
        raw_settings = obj
    elif isinstance(obj, dict):
        raw_settings = [obj]
    else:
        raise DataFormatError(
            f"{path}: config must be a setting object, a list of them, or "
            f"an object with a 'settings' list")
    if not isinstance(raw_settings, list) or not raw_settings:
        raise DataFormatError(f"{path}: 'settings' must be a non-empty list")
    settings = []
    for i, item in enumerate(raw_settings):
        if not isinstance(item, dict):
            raise DataFormatError(f"{path}: settings[{i}] is not an object")
        try:
            settings.append(SimSetting(**item))
        except TypeError as exc:
            raise DataFormatError(f"{path}: settings[{i}]: {exc}") from None
    known_extras = {"master_seed", "workers", "quad_nodes"}
    unknown = set(extras) - known_extras
    if unknown:
        raise DataFormatError(
            f"{path}: unknown top-level config keys {sorted(unknown)}; "
            f"allowed: {sorted(known_extras)}")
    return settings, extras


def _cmd_simulate(ns) -> int:
    settings, extras = _load_study_config(ns.config)
    seed = _resolve_seed(ns.seed)
    if seed is None:
        seed = extras.get("master_seed", 2026)
    threads = ns.threads if ns.threads is not None else _env_int(ENV_THREADS)
    if threads is None:
        threads = extras.get("workers", 1)
    if threads < 1:
        raise _UsageError(f"--threads must be >= 1, got {threads}")
    M = extras.get("quad_nodes", DEFAULT_QUAD_NODES)
    report = run_study(settings, master_seed=seed, workers=threads, M=M)
    report.write_csv(ns.out)
    print(f"report written to {ns.out}: {len(report.records)} records "
          f"across {len(settings)} settings")
    return EXIT_OK


def _cmd_scree(ns) -> int:
    _, X = read_matrix_csv(ns.x)
    _, Y = read_matrix_csv(ns.y)
    rows, available = scree_table(X, Y, ns.k)
    if ns.k > available:
        print(f"{_PROG}: scree: requested {ns.k} components, data supports "
              f"{available}; output truncated", file=sys.stderr)
    writer = csv.writer(sys.stdout)
    writer.writerow(["component", "sv_xty", "eig_xtx", "eig_yty"])
    for row in rows:
        writer.writerow([row["component"], repr(row["sv_xty"]),
                         repr(row["eig_xtx"]), repr(row["eig_yty"])])
    return EXIT_OK


def _one_line(message: str) -> str:
    return " ".join(str(message).split()) or "unspecified error"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"{_PROG}: usage error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    if getattr(ns, "func", None) is None:
        print(f"{_PROG}: usage error: a command is required "
              f"(fit|predict|test|simulate|scree)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return ns.func(ns)
    except _UsageError as exc:
        print(f"{_PROG}: usage error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, DimensionMismatchError) as exc:
        print(f"{_PROG}: {ns.command}: input error: {_one_line(exc)}",
              file=sys.stderr)
        return EXIT_FILE
    except OSError as exc:
        print(f"{_PROG}: {ns.command}: file error: {_one_line(exc)}",
              file=sys.stderr)
        return EXIT_FILE
    except (GlmPo2plsError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"{_PROG}: {ns.command}: numerical abort: {_one_line(exc)}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:   # last resort: keep the contract of one line
        print(f"{_PROG}: {ns.command}: internal error "
              f"({type(exc).__name__}): {_one_line(exc)}", file=sys.stderr)
        return EXIT_NUMERIC


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
