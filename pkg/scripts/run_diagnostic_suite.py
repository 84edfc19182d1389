"""Train the source-only, DAA-E, DAA, DAA-no-mask and DAA-lambda0 runs over
several seeds and print the ordering, histogram and equilibrium checks.

    python3 scripts/run_diagnostic_suite.py --out runs/suite --seeds 5
"""

import argparse
import logging
import time
from pathlib import Path

from daa.experiments import (
    SUITE_RUNS,
    check_ablation_ordering,
    check_equilibrium,
    check_histogram_concentration,
    run_suite,
    summarize,
    write_summary,
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    start = time.perf_counter()
    results = run_suite(SUITE_RUNS, range(args.seeds), args.out)
    summary = summarize(results)
    write_summary(summary, Path(args.out) / "summary.json")

    print(f"{'run':<14} {'target mAP per seed':<40} median")
    for name in SUITE_RUNS:
        maps = " ".join(f"{m:.3f}" for m in summary[name]["target_map"])
        print(f"{name:<14} {maps:<40} {summary[name]['median_target_map']:.3f}")
    for check in (check_ablation_ordering(summary), check_histogram_concentration(summary), check_equilibrium(summary)):
        print(check.line())
    print(f"elapsed {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
