"""The fixed synthetic benchmark behind the trend experiments.

Five lesion classes, 50 patients per class, small lesions under heavy pixel
noise, off-body mimic distractors and a weak whole-image class tint.  The
training settings are scaled down from the full-size defaults so that every
fusion variant trains for three seeds in a few minutes on one CPU core.
"""

from __future__ import annotations

from .config import ModelConfig, TrainConfig
from .data.extract import ExtractorConfig, extract_concepts
from .data.synth import SynthSpec, SyntheticSample, generate_synthetic
from .data.types import ConceptBundle

SPEC = SynthSpec(
    num_classes=5,
    patients_per_class=50,
    images_per_patient_range=(2, 4),
    lesion_area_fraction=(0.01, 0.05),
    background_noise_sigma=0.15,
    distractor_count_range=(1, 3),
    seed=7,
    context_strength=0.04,
    mimic_fraction=0.5,
)

EXTRACTOR = ExtractorConfig()

SEEDS = (0, 1, 2)
RATIO = 0.5


def train_config(**overrides) -> TrainConfig:
    base = TrainConfig(
        learning_rate=1e-3,
        batch_size_train=32,
        batch_size_eval=64,
        epochs=40,
        split_ratio=RATIO,
        model=ModelConfig(d_model=64, heads=8, n_concepts=8, k=2, classifier_dropout=0.3),
    )
    return base.replace(**overrides) if overrides else base


def build(spec: SynthSpec = SPEC, extractor: ExtractorConfig = EXTRACTOR
          ) -> tuple[list[SyntheticSample], list[ConceptBundle]]:
    """Render the images and run the concept extractor on each."""
    samples = generate_synthetic(spec)
    bundles = [
        extract_concepts(s.image, extractor, s.truth.patient_id, s.truth.image_id, s.truth.label)
        for s in samples
    ]
    return samples, bundles
