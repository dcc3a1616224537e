#!/usr/bin/env python3
"""Empirical check of the meeting-operator distribution.

Draws N operators from the configured categorical distribution through the
journaled PRNG and prints observed vs target frequencies.

Usage:
    python scripts/operator_draw_check.py [--draws 10000] [--seed 424242]
"""

import argparse
import sys
import tempfile
from pathlib import Path

from dlma.journal import Journal, JournaledRandom

TARGET = {"involve": 0.10, "improve": 0.30, "integrate": 0.50,
          "unchanged": 0.10}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--draws", type=int, default=10_000)
    parser.add_argument("--seed", type=int, default=424242)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as scratch:
        journal = Journal.create(Path(scratch) / "draws.jsonl")
        rng = JournaledRandom(args.seed, journal)
        counts = {op: 0 for op in TARGET}
        for i in range(args.draws):
            counts[rng.categorical(f"d{i}", TARGET)] += 1
        journal.close()

    print(f"{args.draws} draws, seed {args.seed}")
    print(f"{'operator':<10} {'target':>8} {'observed':>9} {'delta':>8}")
    worst = 0.0
    for op, p in TARGET.items():
        freq = counts[op] / args.draws
        worst = max(worst, abs(freq - p))
        print(f"{op:<10} {p:>8.3f} {freq:>9.4f} {freq - p:>+8.4f}")
    print(f"max deviation {worst:.4f}")
    return 0 if worst <= 0.01 else 1


if __name__ == "__main__":
    sys.exit(main())
