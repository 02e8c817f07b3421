import sys

import numpy as np
import pytest

from cafusion import fusion, mil_head
from cafusion.config import ModelConfig, TrainConfig
from cafusion.data import ExtractorConfig, SynthSpec, extract_concepts, generate_synthetic


def random_fusion_params(D, rng, scale=0.5):
    cfg = ModelConfig(d_model=D, heads=2, variant="ours")
    p = fusion.init_params(cfg, rng, np.float64)
    for k in p:
        p[k] = rng.normal(0.0, scale, p[k].shape)
    p["fusion.ln_g"] = 1.0 + 0.1 * rng.standard_normal(D)
    return p


def random_classifier_params(D, C, rng, scale=0.5, d_in=None):
    p = mil_head.init_params(ModelConfig(d_model=D, num_classes=C, heads=1), rng, np.float64)
    if d_in is not None:
        p["cls.w1"] = np.zeros((d_in, D))
    return {k: rng.normal(0.0, scale, v.shape) for k, v in p.items()}


def tiny_train_config(**overrides):
    base = TrainConfig(
        learning_rate=3e-3, batch_size_train=8, batch_size_eval=16, epochs=3, split_ratio=0.5,
        model=ModelConfig(d_model=16, heads=2, n_concepts=6, k=2, num_classes=3, classifier_dropout=0.2),
    )
    return base.replace(**overrides) if overrides else base


TINY_SPEC = SynthSpec(num_classes=3, patients_per_class=4, images_per_patient_range=(1, 2), seed=3)


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_synthetic(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_bundles(tiny_samples):
    cfg = ExtractorConfig()
    return [extract_concepts(s.image, cfg, s.truth.patient_id, s.truth.image_id, s.truth.label)
            for s in tiny_samples]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
