"""
Quickstart: synthetic photos to a trained fusion classifier
============================================================

Renders a small synthetic dataset, extracts concepts, trains the
cross-attentive model for a few epochs and prints validation metrics.
Runs in well under a minute.
"""

import numpy as np

from cafusion import ModelConfig, TrainConfig, train
from cafusion.data import SynthSpec, extract_concepts, generate_synthetic, split_by_patient
from cafusion.evaluation import evaluate

# three lesion classes, eight patients each, one to three photos per patient
spec = SynthSpec(num_classes=3, patients_per_class=8, images_per_patient_range=(1, 3), seed=1)
samples = generate_synthetic(spec)
print(len(samples), "images,", spec.num_classes * spec.patients_per_class, "patients")

# each image becomes a bundle: one global descriptor plus one descriptor per salient blob
bundles = [extract_concepts(s.image, None, s.truth.patient_id, s.truth.image_id, s.truth.label)
           for s in samples]
counts = np.array([b.n_real for b in bundles])
print("concepts per image: min %d, median %d, max %d" % (counts.min(), np.median(counts), counts.max()))

train_set, val_set = split_by_patient(bundles, 0.5, seed=0)

config = TrainConfig(
    learning_rate=1e-3, batch_size_train=16, batch_size_eval=32, epochs=15,
    model=ModelConfig(num_classes=3, d_model=64, heads=8, n_concepts=8, k=2, classifier_dropout=0.3),
)
result = train(train_set, val_set, config)
for rec in result.log[::5]:
    print("epoch %2d  loss %.3f  val acc %.3f" % (rec["epoch"], rec["train_loss"], rec["val_accuracy"]))

model = result.model()  # weights from the best validation epoch
report = evaluate(model, val_set)
print({k: round(v, 3) for k, v in report.summary().items()})
print(report.confusion)
