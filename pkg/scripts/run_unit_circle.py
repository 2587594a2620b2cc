"""Run the three unit-circle experiments at several noise levels.

Usage: python scripts/run_unit_circle.py [--seed N]
"""

import argparse
import sys

from twistgraph.fgraph import optimize
from twistgraph.simkit import arc_distance, unit_circle_fixtures


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    for variant in ("EXTRAPOLATE", "INTERPOLATE", "CHAIN"):
        for sigma in (0.0, 0.1, 0.3):
            graph, initial, keys, _ = unit_circle_fixtures(
                variant, sigma=sigma, seed=args.seed)
            solution, report = optimize(graph, initial)
            worst = max(arc_distance(solution.get(k).translation)
                        for k in keys)
            print(f"{variant:<12} sigma={sigma:<4} iters={report.iterations:<3}"
                  f" cost={report.final_cost:<10.3g} max arc dist={worst:.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
