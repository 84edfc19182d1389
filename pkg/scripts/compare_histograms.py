"""Print two runs' binned domain probabilities side by side as text bars.

    python3 scripts/compare_histograms.py runs/suite/DAA/seed0 runs/suite/DAA-no-mask/seed0 --adaptor local
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path


def load(run_dir: Path, adaptor: str) -> dict:
    counts = defaultdict(int)
    with (run_dir / "histograms.csv").open() as fh:
        for row in csv.DictReader(fh):
            if row["adaptor"] == adaptor:
                counts[(float(row["lo"]), float(row["hi"]))] += int(row["count"])
    return dict(sorted(counts.items()))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("runs", nargs=2, type=Path)
    parser.add_argument("--adaptor", default="local")
    parser.add_argument("--width", type=int, default=30)
    args = parser.parse_args()

    hists = [load(r, args.adaptor) for r in args.runs]
    totals = [max(sum(h.values()), 1) for h in hists]
    print(f"{'bin':<11} " + " ".join(f"{r.as_posix()[-args.width:]:<{args.width + 8}}" for r in args.runs))
    for key in hists[0]:
        cells = []
        for h, total in zip(hists, totals):
            share = h.get(key, 0) / total
            cells.append(f"{'#' * round(share * args.width):<{args.width}} {share:6.1%}")
        print(f"{key[0]:.2f}-{key[1]:.2f}  " + "  ".join(cells))
    for run, h, total in zip(args.runs, hists, totals):
        var = sum(n * ((lo + hi) / 2 - 0.5) ** 2 for (lo, hi), n in h.items()) / total
        print(f"{run}: binned variance about 0.5 = {var:.4f}")


if __name__ == "__main__":
    main()
