"""
Which concept explains a prediction?
====================================

Trains one model on the benchmark, explains every validation prediction by
its highest-scoring real concept, checks how often that concept is the
lesion, and writes overlay PNGs for a handful of images.

    python demos/interpretation_overlays.py [--variant ours] [--out overlays/]
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from cafusion import benchmark, train
from cafusion.data import split_by_patient
from cafusion.evaluation import export_overlays, image_name, interpret_many, localization

ap = argparse.ArgumentParser()
ap.add_argument("--variant", default="ours", choices=("ours", "local_only", "concat1", "concat2"))
ap.add_argument("--out", default="overlays")
ap.add_argument("--count", type=int, default=6)
args = ap.parse_args()

samples, bundles = benchmark.build()
config = benchmark.train_config(variant=args.variant, seed=0)
tr, va = split_by_patient(bundles, config.split_ratio, config.seed)
model = train(tr, va, config).model()

records = interpret_many(model, va)
truth = {s.truth.image_id: s.lesion_bbox for s in samples}
summary = localization(records, va, truth)
print("%s: %d/%d correct validation images explained by a concept overlapping the lesion (%.1f%%)"
      % (args.variant, summary.hits, summary.correct, 100 * summary.hit_rate))
print("padded slots chosen as explanation:", summary.padded_selected)

# the column scores show how peaked the explanation is
spread = [max(r.column_scores) - min(r.column_scores) for r in records if len(r.column_scores) > 1]
print("median spread of concept scores for the predicted class: %.3f" % np.median(spread))

out = Path(args.out)
img_dir = out / "images"
img_dir.mkdir(parents=True, exist_ok=True)
by_id = {s.truth.image_id: s for s in samples}
chosen = [r for r in records if r.status == "ok"][: args.count]
for r in chosen:
    img = np.round(by_id[r.image_id].image * 255).astype(np.uint8)
    Image.fromarray(img).save(img_dir / image_name(r.patient_id, r.image_id))
paths = export_overlays(chosen, img_dir, out)
print("wrote", len(paths), "files to", out)
