"""Command-line driver: ``ipha {solve,bench,verify,gen}``.

Exit codes: 0 success or pass, 1 usage or input error, 2 solve failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys

from . import io
from .core import IphaParams, solve
from .errors import IphaError
from .harness import ExperimentConfig, emit_aggregate_csv, emit_csv, run_experiment, verify_solution
from .nash import NashGameParams, NashRanges, assemble_instance, counterexample_instance, sample_monotone_instance
from .subsolvers import SubsolverConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SOLVE = 2
EXIT_VERIFY = 3

LOG_COLUMNS = ("k", "stop_quantity", "delta_norm", "alpha", "tau", "inner_iters", "residual")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None


def cmd_solve(args) -> int:
    inst = io.load_instance(args.instance)
    params = IphaParams(r=args.r, sigma=args.sigma, tau=args.tau, stop_tol=args.stop_tol,
                        max_outer_iters=args.max_iters)
    sub = SubsolverConfig(method=args.method, inner_tol=args.inner_tol)
    res = solve(inst, params, sub)
    # a run that fails before its first step has no stop quantity
    stop = res.stop_quantity if math.isfinite(res.stop_quantity) else None
    io.save_solution(args.output, res.x, res.w, status=res.status, r=args.r,
                     iterations=res.iterations, stop_quantity=stop, residual=res.residual)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(LOG_COLUMNS)
            for h in res.history:
                wr.writerow([repr(h[c]) if isinstance(h[c], float) else h[c] for c in LOG_COLUMNS])
    print(f"{res.status}: {res.iterations} outer iterations, {res.inner_iters_total} inner, "
          f"stop quantity {res.stop_quantity:.3e}, residual {res.residual:.3e}")
    for d in res.diagnostics:
        print(f"  scenario {d['scenario']}: {d['method']} {d['inner_iters']} iterations, "
              f"residual {d['residual']:.3e}, fallbacks {d['fallbacks']}", file=sys.stderr)
    return EXIT_OK if res.converged else EXIT_SOLVE


def cmd_bench(args) -> int:
    doc = io.read_document(args.config)
    config = ExperimentConfig.from_dict(doc)
    if args.seed is not None:
        config.master_seed = args.seed

    def progress(rec):
        if args.verbose:
            print(f"{rec.cell_id} seed {rec.seed}: {rec.status} in {rec.outer_iters}", file=sys.stderr)

    records, aggregates = run_experiment(config, jobs=args.jobs, progress=progress)
    emit_csv(records, args.output)
    if args.aggregate:
        emit_aggregate_csv(aggregates, args.aggregate)
    for a in aggregates:
        print(f"{a.cell_id}: {a.converged}/{a.runs} converged, "
              f"mean outer {a.mean_outer_iters:.1f}, mean wall {a.mean_wall_ms:.0f} ms")
    return EXIT_OK if all(a.failures == 0 for a in aggregates) else EXIT_SOLVE


def cmd_verify(args) -> int:
    inst = io.load_instance(args.instance)
    x, w, _ = io.load_solution(args.solution)
    report = verify_solution(inst, x, w, args.tol)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_gen(args) -> int:
    if args.counterexample:
        inst = counterexample_instance()
    elif args.params:
        params = NashGameParams.from_dict(_load_json(args.params))
        inst = assemble_instance(params)
    else:
        if args.seed is None or args.scenarios is None:
            raise UsageError("gen needs --seed and --scenarios, --params, or --counterexample")
        ranges = NashRanges.from_dict(_load_json(args.ranges)) if args.ranges else None
        params, inst, _ = sample_monotone_instance(args.seed, args.scenarios, args.m1, args.m2, ranges)
        if args.params_out:
            io.write_document(args.params_out, params.to_dict())
    io.save_instance(args.output, inst)
    mu = inst.lipschitz_moduli
    print(f"wrote {args.output}: {inst.space.scenario_count} scenarios, n = {inst.space.n}, "
          f"max ||M_s|| = {mu.max():.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ipha", description="Inexact progressive hedging for stochastic VIs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="solve an instance file")
    s.add_argument("instance")
    s.add_argument("-o", "--output", required=True, help="solution file to write")
    s.add_argument("--r", type=float, required=True, help="proximal parameter")
    s.add_argument("--sigma", type=float, default=0.5)
    s.add_argument("--tau", type=float, default=1.0)
    s.add_argument("--stop-tol", type=float, default=1e-5)
    s.add_argument("--max-iters", type=int, default=10_000)
    s.add_argument("--method", choices=("FPA", "SNM"), type=str.upper, default="SNM")
    s.add_argument("--inner-tol", type=float, default=1e-9)
    s.add_argument("--log", help="per-iteration CSV log")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="run an experiment config and write CSV")
    b.add_argument("config")
    b.add_argument("-o", "--output", required=True, help="run-record CSV")
    b.add_argument("--aggregate", help="per-cell aggregate CSV")
    b.add_argument("--seed", type=int, help="override the master seed")
    b.add_argument("-j", "--jobs", type=int, default=1, help="worker processes")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="check a solution against an instance")
    v.add_argument("instance")
    v.add_argument("solution")
    v.add_argument("--tol", type=float, default=1e-6)
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen", help="write a Nash game instance file")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--scenarios", type=int)
    g.add_argument("--m1", type=int, default=10)
    g.add_argument("--m2", type=int, default=10)
    g.add_argument("--ranges", help="JSON file overriding sampling ranges")
    g.add_argument("--params", help="Nash parameter file to assemble instead of sampling")
    g.add_argument("--params-out", help="also write the sampled parameters")
    g.add_argument("--counterexample", action="store_true",
                   help="the fixed two-scenario 2x2 example")
    g.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"ipha: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as e:
        # bad parameters, schema violations, FPA rejected for small r
        print(f"ipha {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except IphaError as e:
        print(f"ipha {args.command}: solver error: {e}", file=sys.stderr)
        return EXIT_SOLVE


if __name__ == "__main__":
    sys.exit(main())
