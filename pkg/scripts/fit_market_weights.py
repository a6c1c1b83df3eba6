#!/usr/bin/env python3
"""Recover the per-market weights of the combined NDCG metric from a table
of (t1 score, t2 score, combined score) triples by constrained least
squares, and show the per-row reconstruction residuals.

With no arguments the embedded reference table is used; pass --scores to
fit a custom TSV with columns label, t1, t2, combined.
"""

import argparse
import csv
import sys
from pathlib import Path

from cmrec import evaluation


def read_scores(path: Path):
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        return tuple((row["label"], float(row["t1"]), float(row["t2"]),
                      float(row["combined"])) for row in reader)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scores", type=Path,
                    help="TSV with columns label, t1, t2, combined")
    args = ap.parse_args(argv)

    rows = (read_scores(args.scores) if args.scores
            else evaluation.REFERENCE_COMBINATION_SCORES)
    weights = evaluation.fit_market_weights(rows)
    print(f"fitted weights: t1={weights['t1']:.4f} t2={weights['t2']:.4f}")
    print(f"{'label':18s} {'t1':>8s} {'t2':>8s} {'combined':>9s} "
          f"{'fit':>8s} {'resid':>9s}")
    worst = 0.0
    for label, t1, t2, combined in rows:
        fit = evaluation.weighted_market_score({"t1": t1, "t2": t2}, weights)
        resid = fit - combined
        worst = max(worst, abs(resid))
        print(f"{label:18s} {t1:8.4f} {t2:8.4f} {combined:9.4f} "
              f"{fit:8.4f} {resid:+9.5f}")
    print(f"max |residual| = {worst:.5f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
