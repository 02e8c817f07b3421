"""Run-length coding of binary masks over a row-major image grid.

Runs alternate 0,1,0,1,... and always start with a (possibly empty) zero-run.
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> np.ndarray:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return np.zeros(1, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def decode(runs: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    total = int(shape[0]) * int(shape[1])
    if runs.sum() != total:
        raise ValueError(f"RLE covers {int(runs.sum())} cells, grid has {total}")
    values = np.arange(runs.size) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def area(runs: np.ndarray) -> int:
    return int(np.asarray(runs, dtype=np.int64)[1::2].sum())
