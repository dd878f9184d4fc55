"""Benchmark command line: ``blocklm {ba,pgo} ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time

from . import io_bench, optim, problems
from .errors import CheiralityError, InvalidArgumentError, ParseError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3
CSV_HEADER = ("iter", "cost", "mse", "lambda", "accepted", "cum_time_s")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _dims(text):
    try:
        a, b = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None
    if a < 1 or b < 1:
        raise argparse.ArgumentTypeError("both sizes must be positive")
    return a, b


def build_parser():
    parser = _Parser(prog="blocklm", description="Sparse Levenberg-Marquardt benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, synth_help in (("ba", "CAMERASxPOINTS synthetic ring scene"),
                             ("pgo", "LEVELSxPOSES synthetic sphere graph")):
        p = sub.add_parser(name, help=f"{name.upper()} benchmark")
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--input", metavar="PATH",
                         help="BAL file" if name == "ba" else "g2o file")
        src.add_argument("--synthetic", type=_dims, metavar="AxB", help=synth_help)
        p.add_argument("--solver", choices=optim.SOLVERS, default="cholesky")
        p.add_argument("--max-iters", type=int, default=50)
        p.add_argument("--damping", type=float, default=1e-6, help="initial damping")
        p.add_argument("--pcg-tol", type=float, default=optim.linsolve.PCG_TOL)
        p.add_argument("--seed", type=int, default=0, help="seed for synthetic data")
        p.add_argument("--noise", type=float, default=None,
                       help="synthetic measurement noise (pixels for ba, scale for pgo)")
        p.add_argument("--perturb", type=float, default=0.05,
                       help="synthetic initial pose perturbation (ba only)")
        p.add_argument("--csv", metavar="PATH", help="write per-iteration convergence CSV")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load(args):
    if args.command == "ba":
        if args.input:
            bal = io_bench.read_bal(args.input)
        else:
            c, p = args.synthetic
            noise = 1.0 if args.noise is None else args.noise
            bal = io_bench.synth_ba(c, p, noise, args.perturb, args.seed).problem
        return problems.build_ba_from_bal(bal)
    if args.input:
        graph = io_bench.read_g2o(args.input)
    else:
        levels, per = args.synthetic
        scale = 1.0 if args.noise is None else args.noise
        graph = io_bench.synth_sphere(levels, per, translation_sigma=0.05 * scale,
                                      rotation_sigma=0.01 * scale, seed=args.seed).graph
    return problems.build_pgo_from_graph(graph)


def write_csv(path, trajectory):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CSV_HEADER)
        for rec in trajectory:
            out.writerow([rec.iteration, repr(rec.cost), repr(rec.mse), repr(rec.damping),
                          int(rec.accepted), f"{rec.time:.6f}"])


def _summary(args, report, wall):
    dataset = args.input or f"synthetic {args.synthetic[0]}x{args.synthetic[1]} seed={args.seed}"
    rows = [("dataset", dataset), ("problem", args.command), ("solver", args.solver),
            ("iterations", report.iterations), ("termination", report.termination),
            ("initial cost", f"{report.trajectory[0].cost:.6e}"),
            ("final error", f"{report.final_cost:.6e}"), ("final MSE", f"{report.final_mse:.6e}"),
            ("wall time (s)", f"{wall:.3f}")]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = optim.LmConfig(initial_damping=args.damping, max_iterations=args.max_iters,
                                solver=args.solver, pcg_tol=args.pcg_tol)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except InvalidArgumentError as exc:
        print(f"blocklm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.max_iters < 0:
        print("blocklm: error: --max-iters must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        problem = _load(args)
    except (OSError, ParseError, ValueError) as exc:
        print(f"blocklm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    start = time.monotonic()
    try:
        report = optim.optimize(problem, config=config)
    except CheiralityError as exc:
        print(f"blocklm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    wall = time.monotonic() - start
    if args.csv:
        write_csv(args.csv, report.trajectory)
    print(_summary(args, report, wall))
    if report.termination == "solver_failure":
        print("blocklm: solver failure: damping reached its upper bound", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
