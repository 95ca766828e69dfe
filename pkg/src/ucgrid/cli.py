"""
Command-line entry point.

    ucgrid run SCENARIO [-o out.csv] [--controller KIND]
    ucgrid eigen SCENARIO [-o DIR]
    ucgrid sweep SCENARIO [--factors 0.5 1 2] [-o out.csv]
    ucgrid verify SCENARIO [--tol 1e-3] [--solution out.json]

Exit codes: 0 completed, 2 invalid input, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments as ex
from . import oracle as orc
from .dynamics import NumericalError
from .stability import EigenReport, EigenSolverError, LinearizationError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERIC = 3


def _scenario(args):
    sc = ex.load_scenario(args.scenario)
    if getattr(args, "controller", None):
        sc = sc.with_controller(kind=args.controller)
    return sc


def cmd_run(args):
    sc = _scenario(args)
    res = ex.run_scenario(sc)
    out = args.output or f"{sc.name}_{sc.controller.kind}.csv"
    res.to_csv(out)
    if res.error:
        print(f"aborted: {res.error}; partial series in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    st = "n/a" if res.settling_time is None else f"{res.settling_time:.3f} s"
    print(f"{sc.name} [{sc.controller.kind}]: settled={res.settled} settling_time={st} "
          f"final max|omega|={res.stats['final_max_omega']:.3e} -> {out}")
    for label, (flag, ratio) in res.oscillation.items():
        if flag:
            print(f"  oscillating: {label} (amplitude ratio {ratio:.3f})")
    return EXIT_OK


def cmd_eigen(args):
    sc = _scenario(args)
    outdir = Path(args.output or f"{sc.name}_eigen")
    reports = ex.run_eigen_study(sc, outdir=outdir)
    failed = False
    for (kind, turbine), rep in reports.items():
        if isinstance(rep, EigenReport):
            print(f"{kind:4s} {turbine.value:13s} abscissa={rep.abscissa:+.6e} {rep.classification}")
        else:
            failed = True
            print(f"{kind:4s} {turbine.value:13s} failed: {rep}")
    print(f"spectra in {outdir}/")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_sweep(args):
    sc = _scenario(args)
    rows = ex.run_robustness_sweep(sc, factors=args.factors)
    lines = ["factor,settled,settling_time,overshoot,oscillating,ratio,error"]
    for r in rows:
        vals = [r["factor"], r["settled"], r["settling_time"], r["overshoot"], r["oscillating"], r["ratio"]]
        lines.append(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v) for v in vals)
                     + "," + (r["error"] or ""))
        print(lines[-1])
    out = args.output or f"{sc.name}_sweep.csv"
    ex.atomic_write(out, "\n".join(lines) + "\n")
    return EXIT_NUMERIC if any(r["error"] for r in rows) else EXIT_OK


def cmd_verify(args):
    sc = _scenario(args)
    res, sol, report = ex.verify_scenario(sc, tol=args.tol)
    if args.solution:
        sol.to_json(args.solution)
    print(f"{sc.name} [{sc.controller.kind}] oracle {sol.status} (KKT residual {sol.kkt_residual:.1e}): {report}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ucgrid", description="Frequency control and congestion management studies.")
    sub = p.add_subparsers(dest="command", required=True)
    kinds = ["UC", "DUC", "AGC", "droop"]

    r = sub.add_parser("run", help="time-domain simulation, CSV of the requested series")
    r.add_argument("scenario")
    r.add_argument("-o", "--output")
    r.add_argument("--controller", choices=kinds)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eigen", help="eigenvalue study, one re,im CSV per variant")
    e.add_argument("scenario")
    e.add_argument("-o", "--output", help="output directory")
    e.set_defaults(func=cmd_eigen)

    s = sub.add_parser("sweep", help="DUC emulator-error robustness sweep")
    s.add_argument("scenario")
    s.add_argument("--factors", type=float, nargs="+")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="compare the settled state with the dispatch optimum")
    v.add_argument("scenario")
    v.add_argument("--controller", choices=kinds)
    v.add_argument("--tol", type=float, default=1e-3)
    v.add_argument("--solution", help="write the oracle solution as JSON")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except (NumericalError, EigenSolverError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except orc.NotSettledError as exc:
        print(f"not settled: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, LinearizationError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
