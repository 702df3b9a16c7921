"""Command-line front end: ``mms-glhad <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 model/validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .control import synthesize
from .detect import BENCHMARK, GLHAD, GlhadDetector, BenchmarkDetector
from .experiment import ExperimentPlan, fmt, load_plan, run_experiment, write_report, _writer
from .model import AttackSpec, ModelError, NumericalError, dumps_system, load_system
from .simulate import ClosedLoop, make_attack, random_direction
from .structure import build_structures, compare_routes

log = logging.getLogger("mms_glhad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _lambda(s):
    if s == "auto":
        return s
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number or 'auto'") from None
    if v < 0:
        raise argparse.ArgumentTypeError("lambda must be nonnegative")
    return v


def _system(path):
    system = load_system(path)
    return system if system.gains is not None else synthesize(system)


def cmd_synthesize(args):
    system = synthesize(load_system(args.system))
    text = dumps_system(system)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _labels(prefix_dims):
    out = []
    for prefix, dim in prefix_dims:
        out += [f"{prefix}_{i}" for i in range(dim)]
    return out


def cmd_dump_structure(args):
    system = _system(args.system)
    S = build_structures(system)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _labels([(f"y{k}", st.n) for k, st in enumerate(system.stages)])
    cols = {
        "H": _labels([("x0", system.stages[0].m)] + [(f"r{k}", st.m) for k, st in enumerate(system.stages) if k]),
        "H1": _labels([(f"d{k}", st.n) for k, st in enumerate(system.stages)]),
        "Hw": _labels([(f"w{k}", st.m) for k, st in enumerate(system.stages) if k]),
        "Sigma_eps": rows,
    }
    for name, M in (("H", S.H), ("H1", S.H1), ("Hw", S.Hw), ("Sigma_eps", S.Sigma_eps)):
        fh, w = _writer(out / f"{name}.csv", ["row"] + cols[name], args.timestamp)
        with fh:
            for label, row in zip(rows, M):
                w.writerow([label] + [fmt(v) for v in row])
    return 0


def cmd_simulate(args):
    system = _system(args.system)
    S = build_structures(system)
    loop = ClosedLoop(system)
    seed = system.noise_seed if args.seed is None else args.seed
    if (args.stage is None) != (args.snr is None):
        raise UsageError("--stage and --snr go together")
    fh, w = _writer(Path(args.out), ["seed", "attacked_stage", "snr"] + [f"y_{i}" for i in range(system.N)],
                    args.timestamp)
    with fh:
        for i in range(args.n):
            row_seed = seed + i
            stage, delta = None, None
            if args.stage is not None:
                d = random_direction(np.random.default_rng([row_seed, 1]), system.stages[args.stage].n)
                delta = make_attack(system, S, args.stage, d, args.snr).delta
                stage = args.stage
            y = loop.measurements(np.random.default_rng(row_seed), 1, stage, delta)[0]
            w.writerow([row_seed, "none" if stage is None else stage,
                        fmt(0.0 if args.snr is None else args.snr)] + [fmt(v) for v in y])
    return 0


def _read_runs(path, N):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    ys = []
    for row in reader:
        try:
            ys.append(np.array([float(row[f"y_{i}"]) for i in range(N)]))
        except (KeyError, ValueError) as exc:
            raise ModelError(f"{path}: bad run record ({exc})") from None
    return ys


def cmd_detect(args):
    system = _system(args.system)
    S = build_structures(system)
    methods = [GLHAD, BENCHMARK] if args.method == "both" else [args.method]
    dets = []
    for m in methods:
        if m == GLHAD:
            dets.append(GlhadDetector(S, args.alpha, args.lam))
        else:
            dets.append(BenchmarkDetector(system, S.Sigma_eps, args.alpha))
    K = system.K
    header = (["method", "alarmed", "localized"] + [f"t2_{k}" for k in range(K + 1)]
              + [f"ucl_{k}" for k in range(K + 1)])
    out = Path(args.out) if args.out else None
    if out is None:
        fh, w = None, csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
    else:
        fh, w = _writer(out, header, args.timestamp)
    try:
        for y in _read_runs(args.input, system.N):
            for det in dets:
                res = det(y)
                w.writerow([res.method, fmt(res.alarmed), fmt(res.localized)]
                           + [fmt(v) for v in res.t2] + [fmt(v) for v in res.ucl])
    finally:
        if fh is not None:
            fh.close()
    return 0


def cmd_experiment(args):
    plan = load_plan(args.plan)
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.horizon is not None:
        overrides["horizon"] = args.horizon
    if args.method not in (None, "both"):
        overrides["methods"] = (args.method,)
    if args.system is not None:
        overrides["system"] = Path(args.system)
    plan = replace(plan, **overrides)
    report = run_experiment(plan, jobs=args.jobs)
    for p in write_report(report, args.out, timestamp=args.timestamp):
        log.info("wrote %s", p)
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest
    ok = run_selftest(_system(args.system), reps=args.reps, alpha=args.alpha,
                      seed=0 if args.seed is None else args.seed)
    return 0 if ok else 3


def build_parser():
    p = _Parser(prog="mms-glhad", description="Attack detection and localization for multistage processes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, system=True):
        if system:
            sp.add_argument("--system", required=True, help="system JSON file")
        sp.add_argument("--no-timestamp", dest="timestamp", action="store_false",
                        help="omit the '# generated' line from CSV output")

    sp = sub.add_parser("synthesize", help="synthesize LQG and Kalman gains into the system file")
    sp.add_argument("--system", required=True)
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("dump-structure", help="write H, H1, Hw and Sigma_eps as CSV")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_dump_structure)

    sp = sub.add_parser("simulate", help="simulate products and write run records")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n", type=int, default=1, help="number of products")
    sp.add_argument("--stage", type=int, help="attacked stage")
    sp.add_argument("--snr", type=float, help="attack SNR (direction drawn per product)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("detect", help="score run records with a detector")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out")
    sp.add_argument("--method", choices=[GLHAD, BENCHMARK, "both"], default=GLHAD)
    sp.add_argument("--alpha", type=float, default=0.01)
    sp.add_argument("--lambda", dest="lam", type=_lambda, default="auto")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("experiment", help="run the ARL / localization study")
    common(sp, system=False)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--system", help="override the plan's system file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--lambda", dest="lam", type=_lambda)
    sp.add_argument("--method", choices=[GLHAD, BENCHMARK, "both"])
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("selftest", help="closed-form vs oracle and null-calibration checks")
    sp.add_argument("--system", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--alpha", type=float, default=0.01)
    sp.add_argument("--reps", type=int, default=10_000)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    level = os.environ.get("MMS_GLHAD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ModelError, ValueError, OSError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
