"""Command-line entry point: accuracy and variance benchmarks, sanity checks, gradcheck.

Exit codes: 0 success, 1 a check failed, 2 usage error, 3 numerical
convergence failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import bench
from . import estimators as est
from .errors import ConvergenceError, DomainError

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_CONVERGENCE = 0, 1, 2, 3
MIN_CHECK_SAMPLES = 10_000
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def render(rows: list[dict], fmt: str, metadata: dict) -> str:
    """CSV with a schema comment and header row, or JSON with a metadata block."""
    timing = [k for k in bench.TIMING_FIELDS if rows and k in rows[0]]
    if fmt == "json":
        meta = dict(metadata)
        meta["schema"] = SCHEMA_VERSION
        meta["columns"] = {
            k: {"nondeterministic": k in timing} for k in (rows[0].keys() if rows else [])
        }
        return json.dumps({"metadata": meta, "rows": rows}, indent=2, sort_keys=False) + "\n"
    buf = io.StringIO()
    buf.write(f"# schema={SCHEMA_VERSION}\n")
    if rows:
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(list(rows[0].keys()))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def _emit(args, rows: list[dict], config: dict, extra: dict | None = None):
    metadata = {"seed": args.seed, "config": config, "git_describe": _git_describe()}
    if extra:
        metadata.update(extra)
    text = render(rows, args.format, metadata)
    if args.output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text, newline="")


def _choices(value: str, allowed, what):
    items = list(allowed) if value == "all" else [v.strip() for v in value.split(",") if v.strip()]
    bad = [v for v in items if v not in allowed]
    if bad or not items:
        raise UsageError(f"invalid {what} {value!r}; choose from {', '.join(allowed)} or all")
    return items


# ---------------------------------------------------------------------------
# subcommands


def cmd_accuracy(args) -> int:
    families = _choices(args.family, bench.FAMILIES, "family")
    precisions = _choices(args.precision, tuple(bench.PRECISIONS), "precision")
    methods = _choices(args.method, bench.METHODS, "method")
    rows, status = [], EXIT_OK
    for fam in families:
        for prec in precisions:
            for meth in methods:
                r = bench.accuracy(fam, prec, meth, args.seed, args.delta)
                rows.append(r.as_dict())
                failures = r.n_excluded + r.n_not_converged
                if failures > bench.MAX_ORACLE_FAILURE_RATE * r.n_points:
                    status = EXIT_CONVERGENCE
    config = {
        "family": families,
        "precision": precisions,
        "method": methods,
        "delta": args.delta,
    }
    _emit(args, rows, config)
    return status


def cmd_variance(args) -> int:
    kinds = _choices(args.estimators, est.ESTIMATORS, "estimator")
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    prob = est.toy_problem(args.problem)
    grid = prob.phi_grid() if not args.phi else [float(x) for x in args.phi.split(",")]
    rows = []
    root = np.random.default_rng(args.seed)
    streams = root.spawn(len(kinds))
    for kind, rng in zip(kinds, streams):
        pts = est.variance_of(kind, prob, grid, args.n, rng, threads=args.threads, delta=args.delta)
        rows += [
            {
                "problem": args.problem,
                "estimator": p.estimator,
                "phi": p.phi,
                "variance": p.variance,
                "mean_grad": p.mean_grad,
                "analytic_grad": p.target,
                "n": p.n,
                "seconds_per_sample": p.seconds_per_sample,
            }
            for p in pts
        ]
    config = {"problem": args.problem, "estimators": kinds, "phi": list(grid), "n": args.n, "delta": args.delta}
    _emit(args, rows, config, {"phi_star": prob.phi_star})
    return EXIT_OK


def cmd_check(args) -> int:
    if args.n < MIN_CHECK_SAMPLES:
        raise UsageError(f"--n must be at least {MIN_CHECK_SAMPLES}")
    families = _choices(args.families, ("gamma", "von-mises", "normal"), "family")
    results = bench.sanity(families, args.n, args.seed)
    print(f"seed={args.seed} n={args.n}", file=sys.stderr)
    for r in results:
        tag = "PASS" if r.passed else "FAIL"
        print(
            f"{tag} {r.family} param={r.parameter:g} estimate={r.estimate:.6g} "
            f"target={r.target:.6g} stderr={r.stderr:.3g}",
            file=sys.stderr,
        )
    _emit(args, [r.as_dict() for r in results], {"families": families, "n": args.n})
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _parse_params(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--param expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"--param {k} is not a number: {v!r}") from None
    return out


def cmd_gradcheck(args) -> int:
    params = _parse_params(args.param)
    z = args.z
    if z is None:
        z = {
            "gamma": params.get("alpha", 1.0),
            "von-mises": 1.0,
            "truncated-normal": 0.5 * (params.get("a", -1.0) + params.get("b", 1.0)),
        }[args.family]
    try:
        row = bench.gradcheck(args.family, params, z, args.delta).as_dict()
    except DomainError as err:
        print(f"error: {err} (family={args.family}, params={params}, z={z})", file=sys.stderr)
        return EXIT_CHECK
    if args.method == "autodiff":
        for k in ("finite_diff", "autodiff_minus_fd"):
            row.pop(k)
    elif args.method == "finite-diff":
        for k in ("autodiff", "autodiff_minus_fd", "autodiff_minus_oracle"):
            row.pop(k)
    _emit(args, [row], {"family": args.family, "params": params, "z": z, "method": args.method})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="RNG seed (default 0)")
    p.add_argument("--output", default="-", help="report path ('-' for stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="implicit-reparam", description="Implicit reparameterization gradient benchmarks"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="accuracy and variance benchmarks")
    bsub = b.add_subparsers(dest="bench_command", required=True)

    acc = bsub.add_parser("accuracy", help="CDF-derivative error against the oracle")
    acc.add_argument("--family", default="all", help="gamma, von-mises or all")
    acc.add_argument("--precision", default="all", help="single, double or all")
    acc.add_argument("--method", default="all", help="autodiff, finite-diff or all")
    acc.add_argument("--delta", type=float, default=None, help="relative FD step (default per family/precision)")
    _common(acc)
    acc.set_defaults(func=cmd_accuracy)

    var = bsub.add_parser("variance", help="gradient variance on the cross-entropy toy problems")
    var.add_argument("--problem", choices=sorted(est.TOY_PROBLEMS), default="dirichlet")
    var.add_argument("--estimators", default="implicit,score", help="comma list of implicit, score, finite-diff")
    var.add_argument("--phi", default=None, help="comma-separated phi grid (default: 7 points around the optimum)")
    var.add_argument("--n", type=int, default=1000)
    var.add_argument("--delta", type=float, default=1e-5)
    var.add_argument("--threads", type=int, default=1)
    _common(var)
    var.set_defaults(func=cmd_variance)

    chk = sub.add_parser("check", help="sanity checks")
    csub = chk.add_subparsers(dest="check_command", required=True)
    san = csub.add_parser("sanity", help="Monte Carlo gradient identities")
    san.add_argument("--families", default="all", help="gamma, von-mises, normal or all")
    san.add_argument("--n", type=int, default=100_000)
    _common(san)
    san.set_defaults(func=cmd_check)

    gc = sub.add_parser("gradcheck", help="dF/dparam by autodiff, finite differences and oracle")
    gc.add_argument("--family", choices=("gamma", "von-mises", "truncated-normal"), required=True)
    gc.add_argument("--param", action="append", help="name=value (alpha, kappa, mu, sigma, a, b)")
    gc.add_argument("--z", type=float, default=None, help="evaluation point (default per family)")
    gc.add_argument("--method", choices=("autodiff", "finite-diff", "all"), default="all")
    gc.add_argument("--delta", type=float, default=None)
    _common(gc)
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as err:
        print(f"convergence failure: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
