"""Run the ARL / localization study on the shipped system and print a compact table.

    python3 scripts/run_study.py --out results/ [--reps 300] [--jobs 1]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from mms_glhad.experiment import load_plan, run_experiment, write_report

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--plan", default=str(ROOT / "plans" / "paper_numerical.json"))
    ap.add_argument("--out", default="results")
    ap.add_argument("--reps", type=int)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    plan = load_plan(args.plan)
    if args.reps:
        plan = replace(plan, replications=args.reps, null_replications=args.reps)
    rep = run_experiment(plan, jobs=args.jobs)
    write_report(rep, args.out, timestamp=False)

    stages = range(rep.K + 1) if plan.stages_to_attack is None else plan.stages_to_attack
    print(f"{'method':<10} {'snr':>5} {'stage':>5} {'ARL':>8} {'accuracy':>9}")
    for m in rep.methods:
        print(f"{m:<10} {'null':>5} {'-':>5} {rep.arl_samples(m, 0.0, None).mean():8.2f} "
              f"{'fa ' + format(rep.null_alarm_rate(m), '.3f'):>9}")
        for snr in plan.snr_levels:
            for k in stages:
                print(f"{m:<10} {snr:5.1f} {k:5d} {rep.arl_samples(m, float(snr), k).mean():8.2f} "
                      f"{rep.accuracy(m, float(snr), k):9.3f}")


if __name__ == "__main__":
    main()
