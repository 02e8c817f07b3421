"""Fixed-size concept padding, patient-level splits and batch collation."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .types import ConceptBundle, ConceptRecord, FeatureBatch


def pad_concepts(bundle: ConceptBundle, n: int, pad_sigma: float = 0.01, rng_seed=0, slot_shape=None):
    """Return ``(features 1 x n x ..., valid 1 x n)``.

    Real concepts fill the leading slots in extractor order; when there are
    more than ``n`` the ``n`` largest by mask area are kept.  Remaining slots
    hold i.i.d. N(0, pad_sigma^2) noise and are marked invalid.
    """
    concepts = slot_concepts(bundle, n)
    slot_shape = tuple(slot_shape) if slot_shape is not None else _slot_shape(bundle)
    feats = np.empty((1, n) + slot_shape, dtype=np.float32)
    for j, c in enumerate(concepts):
        feats[0, j] = c.feature
    n_pad = n - len(concepts)
    if n_pad:
        noise = np.random.default_rng(rng_seed).standard_normal((n_pad,) + slot_shape)
        feats[0, len(concepts):] = (pad_sigma * noise).astype(np.float32)
    valid = np.zeros((1, n), dtype=bool)
    valid[0, : len(concepts)] = True
    return feats, valid


def slot_concepts(bundle: ConceptBundle, n: int) -> list[ConceptRecord]:
    """The concepts occupying slots ``0 .. n_real-1`` after padding/truncation to ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    concepts = bundle.concepts
    if len(concepts) > n:
        areas = np.array([c.area for c in concepts])
        concepts = [concepts[i] for i in np.argsort(-areas, kind="stable")[:n]]
    return list(concepts)


def _slot_shape(bundle: ConceptBundle) -> tuple[int, ...]:
    if bundle.concepts:
        return tuple(bundle.concepts[0].feature.shape)
    if bundle.global_source.ndim == 1:
        return tuple(bundle.global_source.shape)
    raise ValueError(f"bundle {bundle.image_id} has no concepts and no vector global feature to size padding")


def make_batch(
    bundles: Sequence[ConceptBundle], n: int, pad_sigma: float = 0.01, seed: int = 0, crop_size: int = 32
) -> FeatureBatch:
    """Collate bundles; each one's padding noise is seeded by ``(seed, patient, image)``."""
    zl, valid = [], []
    for b in bundles:
        shape = (crop_size, crop_size, 3) if b.global_source.ndim == 3 else None
        f, v = pad_concepts(b, n, pad_sigma, [seed, b.patient_id, b.image_id], shape)
        zl.append(f)
        valid.append(v)
    g = np.stack([b.global_source for b in bundles]).astype(np.float32)
    if g.ndim == 2:
        g = g[:, None, :]
    return FeatureBatch(
        z_g_in=g,
        z_l_in=np.concatenate(zl),
        valid=np.concatenate(valid),
        labels=np.array([b.label for b in bundles], dtype=np.int64),
        provenance=[(b.patient_id, b.image_id) for b in bundles],
    )


def split_by_patient(bundles: Sequence, train_ratio: float, seed: int = 0):
    """Shuffle patients with ``seed``; the first ceil(ratio * P) go to training.

    Works on anything exposing ``patient_id`` (bundles or synthetic samples via
    their ``truth``).
    """
    if not 0.0 < train_ratio < 1.0:
        raise ValueError("train_ratio must lie in (0, 1)")
    pids = sorted({_pid(b) for b in bundles})
    order = np.random.default_rng(seed).permutation(len(pids))
    n_train = math.ceil(round(train_ratio * len(pids), 9))  # 0.7 * 10 must give 7, not 8
    if n_train == 0 or n_train == len(pids):
        raise ValueError(f"ratio {train_ratio} over {len(pids)} patients leaves one side empty")
    train_ids = {pids[i] for i in order[:n_train]}
    train = [b for b in bundles if _pid(b) in train_ids]
    val = [b for b in bundles if _pid(b) not in train_ids]
    return train, val


def _pid(item) -> int:
    return item.patient_id if hasattr(item, "patient_id") else item.truth.patient_id


class FeatureScaler:
    """Per-dimension standardisation of concept and global vectors.

    Fitted on the training split only and applied before padding, so padded
    slots keep their N(0, pad_sigma^2) distribution in the scaled space.
    Raw-pixel bundles pass through unchanged.
    """

    def __init__(self, local_mean, local_std, global_mean, global_std):
        self.local_mean, self.local_std = local_mean, local_std
        self.global_mean, self.global_std = global_mean, global_std

    @classmethod
    def fit(cls, bundles: Sequence[ConceptBundle], center: bool = True) -> "FeatureScaler | None":
        if not bundles or bundles[0].global_source.ndim != 1:
            return None
        g = np.stack([b.global_source for b in bundles]).astype(np.float64)
        feats = [c.feature for b in bundles for c in b.concepts]
        loc = np.stack(feats).astype(np.float64) if feats else g
        return cls(*_moments(loc, center), *_moments(g, center))

    def transform(self, bundles: Sequence[ConceptBundle]) -> list[ConceptBundle]:
        out = []
        for b in bundles:
            concepts = [
                ConceptRecord(((c.feature - self.local_mean) / self.local_std).astype(np.float32), c.bbox,
                              c.mask_rle, c.prompt_tag)
                for c in b.concepts
            ]
            glob = ((b.global_source - self.global_mean) / self.global_std).astype(np.float32)
            out.append(ConceptBundle(b.patient_id, b.image_id, b.label, glob, concepts, b.grid))
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        return {"local_mean": self.local_mean, "local_std": self.local_std,
                "global_mean": self.global_mean, "global_std": self.global_std}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "FeatureScaler | None":
        if not t:
            return None
        return cls(t["local_mean"], t["local_std"], t["global_mean"], t["global_std"])


def _moments(x: np.ndarray, center: bool):
    mean = x.mean(axis=0) if center else np.zeros(x.shape[1])
    std = x.std(axis=0)
    std = np.where(std > 1e-6, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)
