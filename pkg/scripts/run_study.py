#!/usr/bin/env python3
"""Run the seeded desk comparison study and print per-arm target mIoU.

    python3 scripts/run_study.py --out runs/study [--blocks norm width] [--json study.json]
"""
import argparse
import json
import logging
import time

from lidar_uda.evaluate import fmt_pct, report
from lidar_uda.study import desk_config, run_study

BLOCKS = ("norm", "scratch_vs_distill", "pretrain_sets", "teacher", "selftrain", "width")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/study")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--blocks", nargs="*", default=list(BLOCKS), choices=BLOCKS)
    ap.add_argument("--json", default=None, help="also dump arms and timings here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    t0 = time.time()
    study = run_study(desk_config(args.out, args.seed), tuple(args.blocks))
    total = time.time() - t0
    for arm in sorted(study.arms):
        cells = "  ".join(f"{p} {fmt_pct(v):>5s}" for p, v in sorted(study.arms[arm].items()))
        print(f"{arm:24s} mean {fmt_pct(study.mean(arm)):>5s} | {cells}")
    print("seconds:", {k: round(v) for k, v in study.seconds.items()}, "total", round(total))
    report(study.runs, f"{args.out}/reports/study")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"arms": study.arms, "seconds": study.seconds, "total_seconds": total}, f, indent=1)


if __name__ == "__main__":
    main()
