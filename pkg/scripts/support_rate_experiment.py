#!/usr/bin/env python3
"""Run the support-rate perturbation scenario and emit plot data.

Five scripted follower-only runs execute a ten-step plan. The scenario
degrades pre-hoc support along the plan while the post-hoc meetings keep
every step supported, so the pooled series show the expected shape:
pre-hoc non-increasing, post-hoc dominating at every index.

Usage:
    python scripts/support_rate_experiment.py [--out support.csv]
"""

import argparse
import sys
import tempfile
from pathlib import Path

from dlma.follower import render_support_report, support_records_from_events
from dlma.journal import read_events
from dlma.synth import SCENARIO_RUNS, SCENARIO_STEPS, run_support_scenario


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", help="write plot-data CSV here")
    parser.add_argument("--runs", type=int, default=SCENARIO_RUNS)
    parser.add_argument("--steps", type=int, default=SCENARIO_STEPS)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as scratch:
        results = run_support_scenario(Path(scratch), args.runs, args.steps)
        records = []
        for result in results:
            records.extend(
                support_records_from_events(read_events(result.journal_path)))

    text, rows = render_support_report(records)
    print(f"{args.runs} runs x {args.steps} steps")
    print(text)
    if args.out:
        lines = ["step,pre_hoc,post_hoc"]
        for row in rows:
            lines.append(f"{row['step']},{row['pre_hoc']:.6f},"
                         f"{row['post_hoc']:.6f}")
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
