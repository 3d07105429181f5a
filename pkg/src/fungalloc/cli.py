"""Command-line front end: generate, solve, verify, and bench subcommands.

Exit codes: 0 success/converged, 2 iteration limit reached, 3 I/O error,
4 validation error.
"""

import argparse
import csv
import sys
import time

import numpy as np

from . import io as pio
from . import oracle
from .errors import FungallocError, ParseError
from .model import Problem, UtilitySpec
from .solver import SolveOptions, evaluate_dual, solve

EXIT_OK = 0
EXIT_MAX_ITERS = 2
EXIT_IO = 3
EXIT_VALIDATION = 4


def _progress_printer(n: int):
    def cb(rec):
        print(
            f"iteration {rec.iter - 1:02d} | utility={rec.primal_utility / n:.6g} "
            f"| dual_value={rec.dual_value / n:.6g} | gap={rec.gap / n:.2e}"
        )

    return cb


def _write_trace(path: str, trace, m: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = (
            ["iter", "dual_value", "primal_utility", "gap"]
            + [f"p_{j + 1}" for j in range(m)]
            + [f"r_{j + 1}" for j in range(m)]
        )
        writer.writerow(header)
        for rec in trace:
            writer.writerow(
                [rec.iter, repr(rec.dual_value), repr(rec.primal_utility), repr(rec.gap)]
                + [repr(v) for v in rec.prices]
                + [repr(v) for v in rec.usage]
            )


def cmd_generate(args) -> int:
    problem = pio.generate(
        family=args.family,
        n=args.n,
        m=args.m,
        seed=args.seed,
        utility=args.utility,
        alpha=args.alpha,
        rho=args.rho,
        target=args.target,
    )
    path = pio.save_problem(problem, args.out, name=args.name)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_solve(args) -> int:
    problem = pio.load_problem(args.problem)
    options = SolveOptions(
        tolerance=args.tol * problem.n,
        max_iters=args.max_iters,
        update_rule=args.updates,
    )
    callback = _progress_printer(problem.n) if args.verbose else None
    result = solve(problem, options, callback=callback)
    if args.trace:
        _write_trace(args.trace, result.trace, problem.m)
    if args.out_allocation:
        pio.write_matrix(args.out_allocation, result.X_feasible.X)
    if args.out_prices:
        np.savetxt(args.out_prices, result.prices, fmt="%.17g")
    status = "converged" if result.converged else "iteration limit reached"
    print(
        f"{status} after {len(result.trace)} iterations | "
        f"utility={result.primal_utility / problem.n:.6g} | "
        f"gap={result.gap / problem.n:.3e} | "
        f"two_resource_frac={result.frac_two_resources:.3f} | "
        f"positive_slack_frac={result.frac_positive_slack:.3f}"
    )
    return EXIT_OK if result.converged else EXIT_MAX_ITERS


def cmd_verify(args) -> int:
    problem = pio.load_problem(args.problem)
    X = pio.read_matrix(args.allocation, problem.n, problem.m)
    prices = np.loadtxt(args.prices, dtype=float, ndmin=1)
    report = oracle.check_kkt(problem, X, prices, tol=args.tol * problem.n)
    print(
        f"primal_feasibility={report.primal_feasibility:.3e} "
        f"stationarity={report.stationarity:.3e} "
        f"complementary_slackness={report.complementary_slackness:.3e} "
        f"passed={report.passed}"
    )
    return EXIT_OK if report.passed else 1


def fit_loglog(sizes, times):
    """Least-squares fit log(time) = a + b log(size); returns (b, exp(a))."""
    b, a = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times)), 1)
    return float(b), float(np.exp(a))


def time_dual_evaluations(problem: Problem, repetitions: int) -> float:
    prices = np.full(problem.m, 0.5)
    evaluate_dual(problem, prices)  # warm-up
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        evaluate_dual(problem, prices)
        samples.append(time.perf_counter() - start)
    return float(np.mean(samples))


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = []
    for size in sizes:
        n, m = (size, args.m) if args.sweep == "jobs" else (args.n, size)
        problem = pio.generate("scaling", n=n, m=m, seed=args.seed, utility="log")
        mean_s = time_dual_evaluations(problem, args.repetitions)
        rows.append((n, m, mean_s))
        print(f"n={n} m={m} mean_dual_eval_s={mean_s:.4f}")
    xs = [r[0] if args.sweep == "jobs" else r[1] for r in rows]
    b, pref = fit_loglog(xs, [r[2] for r in rows])
    print(f"fit: exponent b={b:.3f}, prefactor exp(a)={pref:.3e}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "m", "mean_seconds"])
            writer.writerows(rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fungalloc",
        description="Fungible resource allocation via dual price discovery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic problem to disk")
    g.add_argument("--family", choices=["medium", "large", "scaling"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, default=4)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument(
        "--utility",
        choices=["linear", "log", "alpha_fair", "power", "target_priority"],
        default="log",
    )
    g.add_argument("--alpha", type=float, default=None)
    g.add_argument("--rho", type=float, default=None)
    g.add_argument("--target", type=float, default=0.2)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--name", default="problem")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve a problem from a manifest")
    s.add_argument("--problem", required=True)
    s.add_argument("--tol", type=float, default=1e-3, help="per-job gap tolerance")
    s.add_argument("--max-iters", type=int, default=300)
    s.add_argument("--updates", choices=["lbfgs", "subgradient"], default="lbfgs")
    s.add_argument("--threads", type=int, default=0, help="worker bound (0 = auto)")
    s.add_argument("--trace", default=None, help="iteration trace CSV path")
    s.add_argument("--out-allocation", default=None)
    s.add_argument("--out-prices", default=None)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("verify", help="check an allocation/price pair")
    v.add_argument("--problem", required=True)
    v.add_argument("--allocation", required=True)
    v.add_argument("--prices", required=True)
    v.add_argument("--tol", type=float, default=1e-3, help="per-job tolerance")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time dual evaluations and fit scaling")
    b.add_argument("--sweep", choices=["jobs", "resources"], required=True)
    b.add_argument("--sizes", required=True, help="comma-separated sweep values")
    b.add_argument("--n", type=int, default=100_000, help="fixed n (resources sweep)")
    b.add_argument("--m", type=int, default=4, help="fixed m (jobs sweep)")
    b.add_argument("--repetitions", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="raw timings CSV")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FungallocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
