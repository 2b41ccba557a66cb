#!/usr/bin/env python3
"""Desk-scale comparison of the flat and branched classifiers.

Generates the synthetic corpus, splits it by patient, trains both model
families for the requested number of runs, and prints mean accuracies plus
the per-run cross-coarse confusion mass.  Optionally writes the aggregated
metric table and confusion grids next to the summary.

Example:
    python3 scripts/run_desk_experiment.py --runs 10 --epochs 20 --out out/desk
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hierpath import dataset as D
from hierpath import metrics as MX
from hierpath import models as M
from hierpath import training as TR
from hierpath.hierarchy import gi_tract_hierarchy


def to_gray(rgb):
    gray = np.round(0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2])
    return gray.astype(np.float32) / 255.0


def build_splits(samples_per_class, noise, seed, hierarchy):
    records = D.generate_synthetic(D.SyntheticSpec(
        samples_per_class=samples_per_class, noise_level=noise, seed=seed))
    assignment = D.split_by_patient(D.records_manifest(records, hierarchy),
                                    rng=np.random.default_rng(seed))
    sets = {}
    for split in D.SPLIT_NAMES:
        idx = [i for i, r in enumerate(records) if assignment[r.patient_id] == split]
        sets[split] = D.ArraySet(
            np.stack([to_gray(records[i].rgb)[None] for i in idx]),
            np.array([records[i].coarse_idx for i in idx]),
            np.array([records[i].fine_idx for i in idx]))
    return sets


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs", type=int, default=10)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--samples", type=int, default=50,
                        help="images per fine class (default 50)")
    parser.add_argument("--noise", type=float, default=30.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=None,
                        help="directory for metrics.csv/json and confusion grids")
    args = parser.parse_args(argv)

    hierarchy = gi_tract_hierarchy()
    sets = build_splits(args.samples, args.noise, args.seed, hierarchy)
    config = TR.TrainConfig(epochs=args.epochs, runs=args.runs,
                            batch_size=32, seed=args.seed)
    sizes = ", ".join(f"{name} {s.images.shape[0]}" for name, s in sets.items())
    print(f"corpus: {sizes}; {args.runs} runs x {args.epochs} epochs per family")

    per_run = {}
    summary = {}
    for family in ("flat", "hier"):
        t0 = time.time()
        results = TR.multi_run(family, M.desk_spec(), sets["train"], config,
                               dev_set=sets["dev"], test_set=sets["test"])
        per_run[family] = [MX.compute_per_run_metrics(r.bundle, hierarchy)
                           for r in results]
        coarse = np.mean([r["coarse_accuracy"] for r in per_run[family]])
        fine = np.mean([r["fine_accuracy"] for r in per_run[family]])
        ccm = [r["cross_coarse_mass"] for r in per_run[family]]
        summary[family] = ccm
        print(f"{family:>5}: coarse {coarse:.3f}  fine {fine:.3f}  "
              f"cross-coarse {np.mean(ccm):.4f}  ({time.time() - t0:.0f}s)")

    wins = sum(h <= f for h, f in zip(summary["hier"], summary["flat"]))
    print(f"cross-coarse mass: hier <= flat in {wins}/{args.runs} paired runs")

    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        report = MX.MetricsReport(hierarchy, per_run)
        MX.render_report(report, args.out / "metrics.csv",
                         args.out / "metrics.json",
                         {family: args.out / f"confusion_{family}.csv"
                          for family in ("flat", "hier")})
        print(f"report written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
