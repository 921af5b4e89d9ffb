"""Command-line front end: ``statmanifold <command> [options]``.

Every report starts with a header holding the schema version, engine
version and the fully resolved configuration, so identical invocations
produce identical bytes.  CSV reports carry the header as a single
``# json {...}`` comment line above the table.

Exit status: 0 success, 1 domain/validation error, 2 numerical
non-convergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys

import numpy as np

from . import __version__
from .connection import alpha_connection, christoffel_second_kind, skewness_tensor
from .curvature import (COEFFICIENT_FLAT_TOL, CURVATURE_FLAT_TOL, riemann_tensor,
                        sectional_curvature)
from .errors import StatManifoldError
from .expr import Expression
from .family import validate_family
from .geodesic import integrate_geodesic
from .inference import (cramer_rao_check, estimator_covariance, expression_estimator, mle_estimator,
                        mse_experiment, curved_mle, sample_mean, sample_median)
from .integrate import Budget
from .metric import fisher_matrix, fisher_matrix_hessian
from .specfile import SCHEMA, load_family, load_model

ENGINE = "statmanifold"
DEFAULTS = Budget()


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _vector(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--tol", type=float, default=DEFAULTS.tol, help="relative quadrature tolerance")
    common.add_argument("--mc-samples", type=int, default=DEFAULTS.mc_samples,
                        help="Monte Carlo sample count for integrals without quadrature")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--output", default="-", help="output path ('-' for standard output)")
    common.add_argument("--format", choices=("json", "csv"), default=None)

    fam = _Parser(add_help=False)
    fam.add_argument("--family", required=True, help="family spec JSON file")

    p = _Parser(prog="statmanifold", description="Information geometry of parametric families.")
    p.add_argument("--version", action="version", version=f"{ENGINE} {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", parents=[common, fam], help="check a family spec")
    s.add_argument("--at", type=_vector, default=None)

    s = sub.add_parser("fisher", parents=[common, fam], help="Fisher information matrix")
    s.add_argument("--at", type=_vector, required=True)
    s.add_argument("--form", choices=("score", "hessian"), default="score")

    s = sub.add_parser("connection", parents=[common, fam], help="alpha-connection coefficients")
    s.add_argument("--at", type=_vector, required=True)
    s.add_argument("--alpha", type=float, default=0.0)

    s = sub.add_parser("curvature", parents=[common, fam], help="Riemann curvature of an alpha-connection")
    s.add_argument("--at", type=_vector, required=True)
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--h", type=float, default=None, help="finite-difference step (default 1e-3 scaled)")

    s = sub.add_parser("geodesic", parents=[common, fam], help="integrate an alpha-geodesic")
    s.add_argument("--from", dest="xi0", type=_vector, required=True)
    s.add_argument("--velocity", type=_vector, required=True)
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--t-end", type=float, default=1.0)
    s.add_argument("--dt", type=float, default=None, help="RK4 step (default t_end/1000)")

    s = sub.add_parser("cramer-rao", parents=[common, fam], help="Monte Carlo Cramer-Rao check")
    s.add_argument("--estimator", choices=("mean", "median", "mle", "custom-expr"), required=True)
    s.add_argument("--expr", default=None, help="expression in x applied to the sample mean (custom-expr)")
    s.add_argument("--claims-unbiased", action="store_true", help="custom-expr estimator claims unbiasedness")
    s.add_argument("--at", type=_vector, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--trials", type=int, default=100_000)

    s = sub.add_parser("mse-expansion", parents=[common], help="second-order MSE expansion experiment")
    s.add_argument("--model", required=True, help="curved-model spec JSON file")
    s.add_argument("--at", type=_vector, required=True)
    s.add_argument("--n-list", type=_int_list, default=[10, 100, 1000])
    s.add_argument("--trials", type=int, default=None, help="fixed trial count (default: adaptive from 1e5)")
    s.add_argument("--max-trials", type=int, default=1_600_000)
    s.add_argument("--bias-correction", choices=("geometric", "empirical", "none"), default="geometric")
    return p


def _budget(args) -> Budget:
    return Budget(tol=args.tol, mc_samples=args.mc_samples, seed=args.seed)


def _header(args) -> dict:
    config = {k: v for k, v in sorted(vars(args).items())}
    return {"schema": SCHEMA, "engine": ENGINE, "version": __version__, "command": args.command,
            "config": config}


def _verdict_converged(*items) -> bool:
    return all(getattr(i, "converged", True) for i in items)


# -- commands ---------------------------------------------------------------


def cmd_validate(args):
    budget = _budget(args)
    family = load_family(args.family, budget)
    diag = validate_family(family, family.domain.center() if args.at is None else args.at, budget=budget)
    report = {"family": family.name, "dim": family.dim, "kind": family.kind,
              "domain": family.domain.to_json(), "diagnostics": diag.to_json()}
    return report, None, diag.converged


def cmd_fisher(args):
    budget = _budget(args)
    family = load_family(args.family, budget)
    fn = fisher_matrix if args.form == "score" else fisher_matrix_hessian
    g = fn(family, args.at, budget)
    return g.to_json(), None, g.converged


def cmd_connection(args):
    budget = _budget(args)
    family = load_family(args.family, budget)
    g = fisher_matrix(family, args.at, budget)
    gamma = alpha_connection(family, args.at, args.alpha, budget)
    T = skewness_tensor(family, args.at, budget)
    report = {"at": list(gamma.at), "alpha": gamma.alpha,
              "gamma_first_kind": gamma.entries.tolist(),
              "gamma_second_kind": christoffel_second_kind(gamma, g).tolist(),
              "skewness": T.entries.tolist(), "raw_asymmetry": gamma.raw_asymmetry,
              "index_order": {"gamma_first_kind": "[i, j, k] = Gamma_{ij,k}",
                              "gamma_second_kind": "[k, i, j] = Gamma^k_{ij}"}}
    return report, None, _verdict_converged(g, gamma, T)


def cmd_curvature(args):
    budget = _budget(args)
    family = load_family(args.family, budget)
    R = riemann_tensor(family, args.at, args.alpha, args.h, budget)
    gamma = alpha_connection(family, args.at, args.alpha, budget)
    conn_max = float(np.max(np.abs(gamma.entries)))
    report = {"at": list(R.at), "alpha": R.alpha, "h": list(R.h), "riemann_max_abs": R.max_abs,
              "connection_max_abs": conn_max,
              "antisymmetry_residual": R.antisymmetry_residual(),
              "verdicts": {"flat_coefficients": conn_max < COEFFICIENT_FLAT_TOL,
                           "flat_curvature": R.max_abs < CURVATURE_FLAT_TOL}}
    if family.dim == 2:
        g = fisher_matrix(family, args.at, budget)
        report["sectional"] = sectional_curvature(R, g, [1.0, 0.0], [0.0, 1.0])
    return report, None, gamma.converged


def cmd_geodesic(args):
    budget = _budget(args)
    family = load_family(args.family, budget)
    path = integrate_geodesic(family, args.xi0, args.velocity, args.alpha, args.t_end, args.dt, budget)
    n = family.dim
    columns = ["t"] + [f"xi_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)]
    summary = {"status": path.status, "message": path.message, "endpoint": path.endpoint.tolist(),
               "t_final": float(path.t[-1]), "steps": int(path.t.size - 1)}
    return summary, (columns, path.rows().tolist()), path.status != "step_failure"


def _estimator(args, family):
    if args.estimator == "mean":
        return sample_mean(family.name in ("gaussian_known_sigma", "bernoulli"))
    if args.estimator == "median":
        return sample_median(family.name == "gaussian_known_sigma")
    if args.estimator == "mle":
        return mle_estimator(family)
    if not args.expr:
        raise StatManifoldError("custom-expr estimator needs --expr")
    return expression_estimator(Expression(args.expr), args.claims_unbiased)


def cmd_cramer_rao(args):
    budget = _budget(args)
    family = load_family(args.family, budget)
    est = _estimator(args, family)
    g = fisher_matrix(family, args.at, budget)
    rep = estimator_covariance(family, args.at, est, args.n, args.trials, args.seed)
    verdict = cramer_rao_check(rep, g)
    report = {"verdict": verdict.to_json(), "experiment": rep.to_json(), "fisher": g.entries.tolist()}
    return report, None, g.converged


def cmd_mse_expansion(args):
    budget = _budget(args)
    model, h_m_a = load_model(args.model, budget)
    rep = mse_experiment(model, args.at, curved_mle(model, start=args.at), args.n_list, args.trials,
                         args.seed, args.bias_correction, h_m_a, args.max_trials, budget)
    m = model.m
    idx = [f"{a + 1}{b + 1}" for a in range(m) for b in range(m)]
    columns = (["N"] + [f"mse_{i}" for i in idx] + [f"pred1_{i}" for i in idx] + [f"pred2_{i}" for i in idx]
               + ["trials"] + [f"N_mse_{i}" for i in idx] + [f"N2_resid_{i}" for i in idx]
               + [f"N2_resid_se_{i}" for i in idx])
    rows = []
    for r in rep.rows:
        rows.append([r.N] + r.mse.ravel().tolist() + r.predicted_first.ravel().tolist()
                    + r.predicted_second.ravel().tolist() + [r.trials] + r.n_mse.ravel().tolist()
                    + r.scaled_residual.ravel().tolist() + (r.N ** 2 * r.residual_cv_se).ravel().tolist())
    return rep.to_json(), (columns, rows), True


COMMANDS = {
    "validate": cmd_validate, "fisher": cmd_fisher, "connection": cmd_connection,
    "curvature": cmd_curvature, "geodesic": cmd_geodesic, "cramer-rao": cmd_cramer_rao,
    "mse-expansion": cmd_mse_expansion,
}
TABLE_FORMAT = {"geodesic": "csv", "mse-expansion": "csv"}


def render(header: dict, report: dict, table, fmt: str) -> str:
    if fmt == "csv":
        if table is None:
            raise _UsageError(f"command {header['command']!r} has no tabular output; use --format json")
        buf = io.StringIO()
        buf.write("# json " + json.dumps({**header, "report": report}) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table[0])
        for row in table[1]:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        return buf.getvalue()
    out = {**header, "report": report}
    if table is not None:
        out["table"] = {"columns": table[0], "rows": table[1]}
    return json.dumps(out, indent=2) + "\n"


def _emit(text: str, output: str):
    if output == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.format is None:
        args.format = TABLE_FORMAT.get(args.command, "json")
    header = _header(args)
    try:
        report, table, ok = COMMANDS[args.command](args)
        text = render(header, report, table, args.format)
    except StatManifoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        err = {"type": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        for attr in ("x", "xi", "direction", "exit_time"):
            if getattr(exc, attr, None) is not None:
                err[attr] = getattr(exc, attr)
        try:
            _emit(json.dumps({**header, "error": err}, indent=2) + "\n", args.output)
        except OSError:
            pass
        return exc.exit_code
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    try:
        _emit(text, args.output)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    if not ok:
        print("warning: numerical procedure did not converge to tolerance", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
