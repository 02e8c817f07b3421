"""
Fusion variants on the synthetic lesion benchmark
==================================================

Trains every fusion variant for three seeds on the fixed benchmark
(``cafusion.benchmark``) and prints mean accuracy next to the published
clinical-data figures for the same variants.  The clinical numbers are not
expected to match; only the ordering is of interest.  About three minutes on
one core.

    python demos/benchmark_trends.py [--seeds 0,1,2] [--out results/]
"""

import argparse
import time

import numpy as np

from cafusion import benchmark
from cafusion.evaluation import run_grid

# accuracies reported on the clinical NTD data, split ratio 0.5
REFERENCE = {"ours": 0.809, "global_only": 0.764, "local_only": 0.690, "concat1": 0.676, "concat2": 0.671,
             "avg_sum": 0.734}
VARIANTS = ("ours", "global_only", "local_only", "concat1", "concat2", "avg_sum")

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", default=",".join(map(str, benchmark.SEEDS)))
ap.add_argument("--out", default=None, help="also write results.csv and confusion matrices here")
args = ap.parse_args()
seeds = [int(s) for s in args.seeds.split(",")]

t0 = time.time()
samples, bundles = benchmark.build()
print("benchmark: %d images, %d patients, built in %.0fs"
      % (len(bundles), len({b.patient_id for b in bundles}), time.time() - t0))

base = benchmark.train_config()
grid = run_grid(bundles, VARIANTS, [benchmark.RATIO], [base.model.k], seeds, base, out_dir=args.out,
                progress=lambda cell, row: print("  %-12s seed %d  acc %.3f" % (cell.variant, cell.seed, row["accuracy"])))

print("\n%-12s %8s %6s %10s" % ("variant", "mean", "std", "clinical"))
for v in sorted(VARIANTS, key=grid.mean_accuracy, reverse=True):
    accs = [r["accuracy"] for r in grid.rows if r["variant"] == v]
    ref = REFERENCE.get(v)
    print("%-12s %8.3f %6.3f %10s" % (v, np.mean(accs), np.std(accs), "%.3f" % ref if ref else "-"))
print("total %.0fs" % (time.time() - t0))
