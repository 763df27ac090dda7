"""Command-line entry point.

Exit codes: 0 converged (or suite passed), 2 completed without convergence
(or a suite check failed), 1 error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from bilab import __version__
from bilab.scenario import EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, OUTPUT_ENV, RunOutcome, output_root, run_scenario


def _run_one(args: tuple) -> RunOutcome:
    ref, out, allow, det = args
    try:
        return run_scenario(ref, out, allow, det)
    except Exception as exc:  # an operational failure in one scenario must not take down the batch
        return RunOutcome(EXIT_ERROR, None, f"error: {ref}: {type(exc).__name__}: {exc}")


def cmd_solve(ns) -> int:
    jobs = [(ref, ns.output_dir, ns.allow_marginal, ns.deterministic) for ref in ns.scenarios]
    if ns.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]
    for ref, o in zip(ns.scenarios, outcomes):
        stream = sys.stderr if o.exit_code == EXIT_ERROR else sys.stdout
        print(o.message.rstrip(), file=stream)
        if o.output_dir is not None:
            print(f"artifacts    {o.output_dir}")
    codes = {o.exit_code for o in outcomes}
    if EXIT_ERROR in codes:
        return EXIT_ERROR
    return EXIT_NOT_CONVERGED if EXIT_NOT_CONVERGED in codes else EXIT_OK


def cmd_suite(ns) -> int:
    from bilab.suites import SUITES, run_suite

    if ns.name not in SUITES:
        print(f"error: unknown suite {ns.name!r}; available: {', '.join(sorted(SUITES))}", file=sys.stderr)
        return EXIT_ERROR
    out = output_root(ns.output_dir) / f"suite-{ns.name}"
    res = run_suite(ns.name, out)
    print(res.table())
    print(f"report       {out / 'suite.json'}")
    return EXIT_OK if res.passed else EXIT_NOT_CONVERGED


def _emit(header: list[str], rows: np.ndarray, path: str | None) -> None:
    print("  ".join(f"{h:>14}" for h in header))
    for row in rows:
        print("  ".join(f"{v:>14.7g}" for v in row))
    if path:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows([[repr(float(v)) for v in row] for row in rows])


def cmd_oracle(ns) -> int:
    from bilab import exact

    if ns.kind == "radial":
        p = exact.RadialParams(m=ns.m, T=ns.T, b=ns.b, H=ns.H)
        r = np.linspace(0.0, p.T, ns.points)
        u = exact.radial_values(p, r)
        slope = exact.radial_integrand(p, r)
        with np.errstate(divide="ignore"):
            w = 1.0 / np.sqrt(np.maximum(1.0 - slope**2, 0.0))
        print(f"radial solution: m={p.m} T={p.T} b={p.b} H={p.H} charge={p.charge:.12g}")
        _emit(["r", "u", "-du/dr", "w"], np.column_stack([r, u, slope, w]), ns.csv)
    else:
        p = exact.CounterexampleParams(m=ns.m, ell=ns.ell, kappa=ns.kappa, eps=ns.eps)
        xm = np.linspace(-2 * p.eps, 2 * p.eps, ns.points)
        x = np.zeros((ns.points, p.m))
        x[:, -1] = xm
        x[:, 0] = ns.offset
        geo = exact.counterexample_geometry(p, x)
        print(f"counterexample: m={p.m} l={p.ell} kappa={p.kappa} eps={p.eps} offset={ns.offset}")
        with np.errstate(invalid="ignore"):
            rows = np.column_stack([xm, exact.counterexample_value(p, x), geo.W, geo.rho, geo.sff])
        _emit(["x_m", "U", "W", "rho", "sff"], rows, ns.csv)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1; exit 2 is reserved for non-convergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--output-dir", help=f"output root (default: ${OUTPUT_ENV} or ./bilab-output)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded transforms for bitwise reproducibility")
    common.add_argument("--jobs", type=int, default=1, help="scenarios to run in parallel")
    common.add_argument("--allow-marginal", action="store_true", help="solve even if the boundary datum is not admissible")

    ap = _Parser(prog="bilab", description="Born-Infeld numerical laboratory")
    ap.add_argument("--version", action="version", version=f"bilab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", parents=[common], help="run scenario files or built-in scenarios")
    s.add_argument("scenarios", nargs="+", help="scenario .toml paths or built-in names")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("suite", parents=[common], help="run a named experiment suite")
    s.add_argument("name")
    s.set_defaults(func=cmd_suite)

    s = sub.add_parser("oracle", parents=[common], help="print closed-form reference tables")
    s.add_argument("kind", choices=["radial", "counterexample"])
    s.add_argument("--m", type=int, default=None)
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--b", type=float, default=1.0)
    s.add_argument("--H", type=float, default=0.0)
    s.add_argument("--ell", type=int, default=1)
    s.add_argument("--kappa", type=float, default=1.0)
    s.add_argument("--eps", type=float, default=0.05)
    s.add_argument("--offset", type=float, default=0.0, help="distance of the sample line from the axis")
    s.add_argument("--points", type=int, default=11)
    s.add_argument("--csv", help="also write the table as CSV")
    s.set_defaults(func=cmd_oracle)
    return ap


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    if getattr(ns, "jobs", 1) < 1:
        print("error: --jobs must be positive", file=sys.stderr)
        return EXIT_ERROR
    if ns.command == "oracle" and ns.m is None:
        ns.m = 2 if ns.kind == "radial" else 4
    try:
        return ns.func(ns)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
