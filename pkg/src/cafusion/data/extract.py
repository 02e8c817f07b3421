"""Blob-based visual-concept extractor (a deterministic promptable-segmenter stand-in).

Saliency is the absolute luminance deviation from the image median, lightly
smoothed; thresholding plus 8-connected labelling yields the concepts, sorted
by descending area.  Each concept gets a box, an RLE mask, a 32 x 32 crop and
a 256-d descriptor; the same descriptor over the whole frame is the global
feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..config import ConfigError
from . import rle
from .types import ConceptBundle, ConceptRecord

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)
DESCRIPTOR_DIM = 256
THUMB = 8


@dataclass(frozen=True)
class ExtractorConfig:
    threshold: float = 0.35
    smooth_sigma: float = 1.0
    min_area: int = 16
    max_concepts: int = 30
    connectivity: int = 8
    mode: str = "vector"  # "vector": 256-d descriptors; "crop": raw c x c x 3 crops
    crop_size: int = 32

    def validate(self) -> None:
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")
        if self.mode not in ("vector", "crop"):
            raise ConfigError("mode must be 'vector' or 'crop'")
        if self.max_concepts < 1 or self.min_area < 1:
            raise ConfigError("max_concepts and min_area must be >= 1")
        if self.crop_size % THUMB:
            raise ConfigError(f"crop_size must be a multiple of {THUMB}")


def saliency(image: np.ndarray, smooth_sigma: float = 1.0) -> np.ndarray:
    lum = image.astype(np.float64) @ _LUMA
    sal = np.abs(lum - np.median(lum))
    return ndimage.gaussian_filter(sal, smooth_sigma) if smooth_sigma > 0 else sal


def resample_box(image: np.ndarray, bbox, size: int) -> np.ndarray:
    """Bilinear ``size x size`` resampling of the box region (pixel centres)."""
    x0, y0, x1, y1 = bbox
    ys = y0 + (np.arange(size) + 0.5) * (y1 - y0) / size - 0.5
    xs = x0 + (np.arange(size) + 0.5) * (x1 - x0) / size - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    chans = [ndimage.map_coordinates(image[..., c], [gy, gx], order=1, mode="nearest") for c in range(3)]
    return np.stack(chans, axis=-1)


class _ImageStats:
    """Per-image filtered channels shared by all concept descriptors."""

    def __init__(self, image: np.ndarray):
        img = image.astype(np.float64)
        self.image = img
        self.lum = img @ _LUMA
        g1 = np.stack([ndimage.gaussian_filter(img[..., c], 1.0) for c in range(3)], -1)
        g3 = np.stack([ndimage.gaussian_filter(img[..., c], 3.0) for c in range(3)], -1)
        self.high = img - g1
        self.mid = g1 - g3
        gy, gx = np.gradient(g1, axis=(0, 1))
        self.grad = np.hypot(gx, gy)
        self.opp = np.stack([img[..., 0] - img[..., 1], 0.5 * (img[..., 0] + img[..., 1]) - img[..., 2]], -1)


def _masked(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return values[mask] if mask.any() else np.zeros((1,) + values.shape[2:])


def descriptor(stats: _ImageStats, mask: np.ndarray, bbox, crop: np.ndarray) -> np.ndarray:
    """256 floats: an 8 x 8 x 3 thumbnail of the crop plus 64 masked statistics."""
    H, W = mask.shape
    thumb = crop.reshape(THUMB, crop.shape[0] // THUMB, THUMB, crop.shape[1] // THUMB, 3).mean(axis=(1, 3))
    inside = _masked(stats.image, mask)
    ring_mask = ndimage.binary_dilation(mask, iterations=3) & ~mask
    ring = _masked(stats.image, ring_mask) if ring_mask.any() else np.zeros((1, 3))
    lum_in = _masked(stats.lum, mask)
    opp_in = _masked(stats.opp, mask)
    area = float(mask.sum())
    x0, y0, x1, y1 = bbox
    bw, bh = x1 - x0, y1 - y0
    ys, xs = np.nonzero(mask)
    if area >= 2:
        cov = np.cov(np.stack([xs, ys]).astype(np.float64))
        ev = np.linalg.eigvalsh(cov)
        ecc = float(np.sqrt(max(0.0, 1.0 - ev[0] / ev[1]))) if ev[1] > 0 else 0.0
    else:
        ecc = 0.0
    hue = np.arctan2(opp_in[:, 1], opp_in[:, 0])
    sat = np.hypot(opp_in[:, 0], opp_in[:, 1])
    hue_hist, _ = np.histogram(hue, bins=8, range=(-np.pi, np.pi), weights=sat)
    hue_hist = hue_hist / (sat.sum() + 1e-9)
    lum_hist, _ = np.histogram(lum_in, bins=8, range=(0.0, 1.0))
    lum_hist = lum_hist / max(lum_in.size, 1)
    dist = ndimage.distance_transform_edt(mask)
    dmax = dist.max() if area else 0.0
    bands_l, bands_c = [], []
    for lo, hi in ((0.0, 1 / 3), (1 / 3, 2 / 3), (2 / 3, 1.01)):
        band = mask & (dist > lo * dmax) & (dist <= hi * dmax) if dmax > 0 else mask
        bands_l.append(float(_masked(stats.lum, band).mean()))
        bands_c.append(float(_masked(stats.opp[..., 0], band).mean()))
    stats_vec = np.concatenate([
        inside.mean(0), inside.std(0), ring.mean(0), ring.std(0), inside.mean(0) - ring.mean(0),
        lum_hist, hue_hist, np.quantile(lum_in, [0.1, 0.25, 0.5, 0.75, 0.9]),
        opp_in.mean(0), opp_in.std(0),
        _masked(stats.grad, mask).mean(0), _masked(stats.high, mask).std(0), _masked(stats.mid, mask).std(0),
        [10.0 * area / (H * W), np.sqrt(area) / H, bw / max(bh, 1), area / max(bw * bh, 1), ecc],
        [float(ring[:, :3].std()), float(np.abs(inside.mean(0) - ring.mean(0)).sum()), bw / W, bh / H],
        bands_l, bands_c,
    ])
    out = np.concatenate([thumb.reshape(-1), stats_vec])
    assert out.size == DESCRIPTOR_DIM, out.size
    return out.astype(np.float32)


def _components(sal: np.ndarray, cfg: ExtractorConfig):
    structure = np.ones((3, 3), bool) if cfg.connectivity == 8 else ndimage.generate_binary_structure(2, 1)
    labels, count = ndimage.label(sal >= cfg.threshold, structure=structure)
    if count == 0:
        return labels, []
    areas = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    ids = [i + 1 for i in np.argsort(-areas, kind="stable") if areas[i] >= cfg.min_area]
    return labels, ids[: cfg.max_concepts]


def extract_concepts(
    image: np.ndarray,
    cfg: ExtractorConfig | None = None,
    patient_id: int = 0,
    image_id: int = 0,
    label: int = -1,
) -> ConceptBundle:
    cfg = cfg or ExtractorConfig()
    cfg.validate()
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    H, W = image.shape[:2]
    stats = _ImageStats(image)
    labels, ids = _components(saliency(image, cfg.smooth_sigma), cfg)
    slices = ndimage.find_objects(labels)
    concepts = []
    for cid in ids:
        sy, sx = slices[cid - 1]
        bbox = (int(sx.start), int(sy.start), int(sx.stop), int(sy.stop))
        mask = labels == cid
        crop = resample_box(stats.image, bbox, cfg.crop_size)
        feat = crop.astype(np.float32) if cfg.mode == "crop" else descriptor(stats, mask, bbox, crop)
        concepts.append(ConceptRecord(feat, bbox, rle.encode(mask), "concept"))
    if cfg.mode == "crop":
        global_src = image.astype(np.float32)
    else:
        full = (0, 0, W, H)
        global_src = descriptor(stats, np.ones((H, W), bool), full, resample_box(stats.image, full, cfg.crop_size))
    return ConceptBundle(patient_id, image_id, label, global_src, concepts, (H, W))
