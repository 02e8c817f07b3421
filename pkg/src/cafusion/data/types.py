from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rle


@dataclass
class ConceptRecord:
    """One visual concept: a feature (vector or c x c x 3 crop), box and mask."""

    feature: np.ndarray
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 with exclusive ends
    mask_rle: np.ndarray
    prompt_tag: str = "concept"

    @property
    def area(self) -> int:
        return rle.area(self.mask_rle)

    def mask(self, grid: tuple[int, int]) -> np.ndarray:
        return rle.decode(self.mask_rle, grid)


@dataclass
class ConceptBundle:
    patient_id: int
    image_id: int
    label: int  # -1 when unknown
    global_source: np.ndarray  # D_in vector or H x W x 3 image
    concepts: list[ConceptRecord] = field(default_factory=list)
    grid: tuple[int, int] = (128, 128)

    @property
    def n_real(self) -> int:
        return len(self.concepts)


@dataclass
class FeatureBatch:
    z_g_in: np.ndarray  # N x 1 x D_in, or N x H x W x 3 raw images
    z_l_in: np.ndarray  # N x n x D_in, or N x n x c x c x 3 raw crops
    valid: np.ndarray  # N x n bool; False exactly on padded slots
    labels: np.ndarray  # N
    provenance: list[tuple[int, int]]  # (patient_id, image_id)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "FeatureBatch":
        idx = np.asarray(idx)
        return FeatureBatch(
            self.z_g_in[idx], self.z_l_in[idx], self.valid[idx], self.labels[idx],
            [self.provenance[i] for i in idx],
        )


def bbox_iou(a, b) -> float:
    """IoU of two exclusive-end boxes ``[x0, y0, x1, y1]``."""
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0
