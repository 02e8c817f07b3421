"""Deterministic synthetic clinical-photo generator.

Every image holds a textured backdrop, one skin-toned "body" ellipse, one
dark lesion whose colour, texture and elongation depend on the class, and a
few class-independent distractor blobs (shadows, marks, jewellery) that are
just as salient as the lesion.  The body tint carries a weak class cue so
the whole image is informative, but less reliably than the lesion itself.

Each image's randomness comes from ``default_rng([seed, patient_id, image_id])``
so images can be generated in any order, or in parallel, with identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..config import ConfigError, from_dict
from . import rle
from .types import ConceptBundle, ConceptRecord

_LUMA = np.array([0.299, 0.587, 0.114])


class InfeasibleGeometryError(ConfigError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 5
    patients_per_class: int = 10
    images_per_patient_range: tuple[int, int] = (1, 3)
    image_size: int = 128
    lesion_area_fraction: tuple[float, float] = (0.01, 0.05)
    background_noise_sigma: float = 0.1
    distractor_count_range: tuple[int, int] = (1, 3)
    seed: int = 0
    # class-cue strengths (0 removes the cue); the lesion cue is always present
    lesion_jitter: float = 0.35
    context_strength: float = 0.06
    # probability that a distractor copies the lesion look of a uniformly random class;
    # such mimics always sit off the body, so only context tells them from the lesion
    mimic_fraction: float = 0.5

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.patients_per_class < 1:
            raise ConfigError("patients_per_class must be >= 1")
        for name in ("images_per_patient_range", "distractor_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must satisfy 0 <= min <= max")
        if self.images_per_patient_range[0] < 1:
            raise ConfigError("every patient needs at least one image")
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        lo, hi = self.lesion_area_fraction
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError("lesion_area_fraction must satisfy 0 < lo < hi < 1")
        if not 0.0 <= self.mimic_fraction <= 1.0:
            raise ConfigError("mimic_fraction must lie in [0, 1]")
        if not 0.0 <= self.background_noise_sigma <= 1.0:
            raise ConfigError("background_noise_sigma must lie in [0, 1]")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        _check_geometry(self)

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return from_dict(cls, json.loads(Path(path).read_text()))


@dataclass
class SyntheticSample:
    image: np.ndarray  # H x W x 3 float32, multiples of 1/255
    truth: ConceptBundle  # one concept: the lesion, tagged "lesion"
    distractor_bboxes: list[tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def lesion_bbox(self) -> tuple[int, int, int, int]:
        return self.truth.concepts[0].bbox


def lesion_area_bounds(spec: SynthSpec) -> tuple[int, int]:
    """Inclusive pixel-count bounds implied by the lesion area fraction."""
    cells = spec.image_size * spec.image_size
    lo, hi = spec.lesion_area_fraction
    return math.ceil(lo * cells - 1e-9), math.floor(hi * cells + 1e-9)


_MAX_ELONGATION = 1.8


def _check_geometry(spec: SynthSpec) -> None:
    a_min, a_max = lesion_area_bounds(spec)
    if a_min < 9:
        raise InfeasibleGeometryError(
            f"lesion_area_fraction lower bound gives {a_min} px on a {spec.image_size}^2 grid; need >= 9"
        )
    if a_max < a_min:
        raise InfeasibleGeometryError("lesion_area_fraction range contains no integer pixel count")
    # the longest lesion axis must fit in the body ellipse's shorter semi-axis
    longest = 2.0 * math.sqrt(a_max * _MAX_ELONGATION / math.pi) * 1.2
    if longest > 0.5 * spec.image_size:
        raise InfeasibleGeometryError(
            f"a lesion of {a_max} px (axis ~{longest:.0f} px) cannot fit inside the body region of a "
            f"{spec.image_size} px image; lower lesion_area_fraction[1] or raise image_size"
        )


def class_lesion_params(c: int, num_classes: int) -> dict[str, float]:
    """Prototype lesion appearance of class ``c``."""
    frac = c / num_classes
    return {
        "hue": 2.0 * math.pi * frac,
        "chroma": 0.10 + 0.06 * (c % 2),
        "texture_freq": (0.15, 0.45, 0.9)[c % 3],
        "texture_amp": 0.05 + 0.05 * ((c // 2) % 2),
        "elongation": 1.0 + (_MAX_ELONGATION - 1.0) * ((c * 2) % num_classes) / max(num_classes - 1, 1),
        "rim": 0.08 * ((c + 1) % 2),
    }


def _hue_rgb(lum: float, hue: float, chroma: float) -> np.ndarray:
    """RGB with the given luminance and an opponent-space hue/chroma offset."""
    d = np.array([math.cos(hue), math.cos(hue - 2.0 * math.pi / 3.0), math.cos(hue + 2.0 * math.pi / 3.0)])
    d -= _LUMA @ d  # keep luminance fixed
    return lum + chroma * d


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _blob_mask(rng, size, center, area, elongation, angle, roughness=0.25) -> np.ndarray:
    """Exactly ``area`` pixels: the lowest values of a roughened elliptical potential.

    Only a window around ``center`` is evaluated; it always holds far more
    than ``area`` pixels.
    """
    half = int(math.ceil(2.0 * math.sqrt(area * elongation / math.pi))) + 4
    x0, y0 = max(0, int(center[0]) - half), max(0, int(center[1]) - half)
    x1, y1 = min(size, int(center[0]) + half + 1), min(size, int(center[1]) + half + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / math.sqrt(elongation)
    v = (-dx * sa + dy * ca) * math.sqrt(elongation)
    pot = np.sqrt(u * u + v * v) * (1.0 + roughness * 0.3 * _smooth_field(rng, u.shape, 4.0))
    order = np.argsort(pot, axis=None, kind="stable")[:area]
    window = np.zeros(u.size, dtype=bool)
    window[order] = True
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y1, x0:x1] = window.reshape(u.shape)
    return mask


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _texture(rng, size, freq) -> np.ndarray:
    """Zero-mean unit-std pattern whose spatial frequency grows with ``freq``."""
    return _smooth_field(rng, (size, size), max(0.6, 2.5 / freq))


def _paint_lesion(img, mask, proto, rng, jit) -> None:
    """Fill ``mask`` with a dark lesion drawn around the class prototype ``proto``."""
    S = img.shape[0]
    les_lum = rng.uniform(0.08, 0.15)
    hue = proto["hue"] + jit * 0.6 * rng.standard_normal()
    chroma = max(0.02, proto["chroma"] * (1.0 + 0.5 * jit * rng.standard_normal()))
    base = _hue_rgb(les_lum, hue, chroma)
    tex = _texture(rng, S, proto["texture_freq"] * math.exp(0.3 * jit * rng.standard_normal()))
    tex_dir = _hue_rgb(0.0, hue + math.pi / 2, 1.0)
    rim = (ndimage.distance_transform_edt(mask) <= 2.0) & mask
    col = base + proto["texture_amp"] * tex[..., None] * tex_dir + 0.02 * tex[..., None]
    col = col + proto["rim"] * rim[..., None] * _hue_rgb(0.0, hue, 1.0)
    img[mask] = col[mask]


def _place_blob(rng, size, blocked, radius, area, elongation, attempts=5):
    """A blob whose 2-px dilation misses ``blocked``, centred where it has room; None if none fits."""
    room = ndimage.distance_transform_edt(~blocked)
    lo, hi = int(math.ceil(radius)), int(math.floor(size - 1 - radius))
    if hi < lo:
        return None
    inner = room[lo : hi + 1, lo : hi + 1]
    cand = np.flatnonzero(inner > radius + 2)
    if cand.size == 0:
        return None
    grown = ndimage.binary_dilation(blocked, iterations=2)
    for _ in range(attempts):
        cy, cx = np.unravel_index(cand[rng.integers(cand.size)], inner.shape)
        m = _blob_mask(rng, size, (cx + lo, cy + lo), area, elongation, rng.uniform(0, math.pi))
        if not (m & grown).any():
            return m
    return None


def image_rng(seed: int, patient_id: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, patient_id, image_id])


def render_image(spec: SynthSpec, label: int, patient_id: int, image_id: int) -> SyntheticSample:
    rng = image_rng(spec.seed, patient_id, image_id)
    S = spec.image_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)

    # backdrop: random hue, luminance in [0.55, 0.7], soft texture
    bg_lum = rng.uniform(0.55, 0.7)
    img = np.broadcast_to(_hue_rgb(bg_lum, rng.uniform(0, 2 * math.pi), rng.uniform(0.05, 0.12)), (S, S, 3)).copy()
    img += 0.03 * _smooth_field(rng, (S, S), S / 16)[..., None]

    # body ellipse: skin tone near the backdrop luminance, weak class tint
    cx, cy = rng.uniform(0.3, 0.7, size=2) * S
    ax, ay = rng.uniform(0.25, 0.35, size=2) * S
    ang = rng.uniform(0, math.pi)
    ca, sa = math.cos(ang), math.sin(ang)
    du, dv = (xx - cx) * ca + (yy - cy) * sa, -(xx - cx) * sa + (yy - cy) * ca
    body = (du / ax) ** 2 + (dv / ay) ** 2 <= 1.0
    body_lum = bg_lum + rng.uniform(-0.05, 0.05)
    tint_hue = 2.0 * math.pi * label / spec.num_classes + 0.5
    skin = _hue_rgb(body_lum, rng.uniform(0, 2 * math.pi), rng.uniform(0.05, 0.12))
    skin = skin + _hue_rgb(0.0, tint_hue, spec.context_strength)
    img[body] = skin + 0.025 * _smooth_field(rng, (S, S), 3.0)[body][:, None]

    # lesion, placed inside the body ellipse
    a_min, a_max = lesion_area_bounds(spec)
    area = int(rng.integers(a_min, a_max + 1))
    proto = class_lesion_params(label, spec.num_classes)
    jit = spec.lesion_jitter
    elong = float(np.clip(proto["elongation"] * math.exp(0.15 * jit * rng.standard_normal()), 1.0, _MAX_ELONGATION))
    radius = math.sqrt(area * elong / math.pi) * 1.2 + 2
    for _ in range(200):
        r, t = math.sqrt(rng.uniform()) * 0.8, rng.uniform(0, 2 * math.pi)
        lx = cx + ca * r * ax * math.cos(t) - sa * r * ay * math.sin(t)
        ly = cy + sa * r * ax * math.cos(t) + ca * r * ay * math.sin(t)
        if radius <= lx <= S - 1 - radius and radius <= ly <= S - 1 - radius:
            break
    else:  # pragma: no cover - geometry check keeps this unreachable in practice
        lx, ly = cx, cy
    lesion = _blob_mask(rng, S, (lx, ly), area, elong, rng.uniform(0, math.pi))
    _paint_lesion(img, lesion, proto, rng, jit)

    # distractors: class-independent salient blobs away from the lesion; mimics copy the
    # look of a uniformly drawn class and are kept off the body
    keep_out = ndimage.binary_dilation(lesion, iterations=4)
    d_lo, d_hi = spec.distractor_count_range
    distractor_boxes = []
    for _ in range(int(rng.integers(d_lo, d_hi + 1))):
        d_area = int(rng.integers(a_min, a_max + 1))
        mimic = rng.uniform() < spec.mimic_fraction
        if mimic:
            m_proto = class_lesion_params(int(rng.integers(spec.num_classes)), spec.num_classes)
            d_el = float(np.clip(m_proto["elongation"] * math.exp(0.15 * jit * rng.standard_normal()),
                                 1.0, _MAX_ELONGATION))
        else:
            d_el = rng.uniform(1.0, _MAX_ELONGATION)
        d_rad = math.sqrt(d_area * d_el / math.pi) * 1.2 + 2
        blocked = keep_out | body if mimic else keep_out
        placed = _place_blob(rng, S, blocked, d_rad, d_area, d_el)
        if placed is None:
            continue
        keep_out |= ndimage.binary_dilation(placed, iterations=4)
        distractor_boxes.append(_bbox(placed))
        if mimic:
            _paint_lesion(img, placed, m_proto, rng, jit)
            continue
        d_lum = rng.uniform(0.08, 0.15) if rng.uniform() < 0.7 else rng.uniform(0.97, 1.0)
        d_hue = rng.uniform(0, 2 * math.pi)
        d_col = _hue_rgb(d_lum, d_hue, rng.uniform(0.02, 0.16))
        d_tex = _texture(rng, S, rng.choice([0.15, 0.45, 0.9]))
        fill = d_col + rng.uniform(0.05, 0.1) * d_tex[..., None] * _hue_rgb(0.0, d_hue + math.pi / 2, 1.0)
        img[placed] = fill[placed]

    img += spec.background_noise_sigma * rng.standard_normal(img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)

    lesion_rec = ConceptRecord(
        feature=np.zeros(0, dtype=np.float32), bbox=_bbox(lesion), mask_rle=rle.encode(lesion), prompt_tag="lesion"
    )
    truth = ConceptBundle(patient_id, image_id, label, np.zeros(0, dtype=np.float32), [lesion_rec], (S, S))
    return SyntheticSample(img, truth, distractor_boxes)


def dataset_layout(spec: SynthSpec) -> list[tuple[int, int, int]]:
    """``(patient_id, image_id, label)`` for every image, in generation order."""
    out = []
    image_id = 0
    lo, hi = spec.images_per_patient_range
    for c in range(spec.num_classes):
        for p in range(spec.patients_per_class):
            pid = c * spec.patients_per_class + p
            count = int(np.random.default_rng([spec.seed, pid]).integers(lo, hi + 1))
            for _ in range(count):
                out.append((pid, image_id, c))
                image_id += 1
    return out


def generate_synthetic(spec: SynthSpec) -> list[SyntheticSample]:
    """Render the full dataset; a pure function of ``spec``."""
    spec.validate()
    return [render_image(spec, label, pid, iid) for pid, iid, label in dataset_layout(spec)]
