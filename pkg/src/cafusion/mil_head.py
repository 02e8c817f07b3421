"""CAM classifier, per-class top-k average pooling and the MIL loss."""

from __future__ import annotations

import numpy as np

from . import nn
from .config import ModelConfig


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    D, std = cfg.d_model, cfg.init_std
    d_in = 2 * D if cfg.variant == "concat2" else D
    return {
        "cls.w1": nn.trunc_normal(rng, (d_in, D), std, dtype),
        "cls.b1": np.zeros(D, dtype=dtype),
        "cls.w2": nn.trunc_normal(rng, (D, D), std, dtype),
        "cls.b2": np.zeros(D, dtype=dtype),
        "cls.w3": nn.trunc_normal(rng, (D, cfg.num_classes), std, dtype),
        "cls.b3": np.zeros(cfg.num_classes, dtype=dtype),
    }


def classify(o: np.ndarray, params, dropout_rate: float = 0.0, rng=None):
    """Per-slot three-layer head ``N x n x D -> N x n x C``; returns ``(o_cam, cache)``."""
    if o.ndim != 3 or o.shape[2] != params["cls.w1"].shape[0]:
        raise ValueError(f"classifier expects N x n x {params['cls.w1'].shape[0]}, got {o.shape}")
    h1, c1 = nn.linear_forward(o, params["cls.w1"], params["cls.b1"])
    a1, g1 = nn.gelu_forward(h1)
    d1, k1 = nn.dropout_forward(a1, dropout_rate, rng)
    h2, c2 = nn.linear_forward(d1, params["cls.w2"], params["cls.b2"])
    a2, g2 = nn.gelu_forward(h2)
    d2, k2 = nn.dropout_forward(a2, dropout_rate, rng)
    cam, c3 = nn.linear_forward(d2, params["cls.w3"], params["cls.b3"])
    return cam, (c1, g1, k1, c2, g2, k2, c3)


def classify_backward(dcam, cache):
    c1, g1, k1, c2, g2, k2, c3 = cache
    g: dict[str, np.ndarray] = {}
    dd2, g["cls.w3"], g["cls.b3"] = nn.linear_backward(dcam, c3)
    dh2 = nn.gelu_backward(nn.dropout_backward(dd2, k2), g2)
    dd1, g["cls.w2"], g["cls.b2"] = nn.linear_backward(dh2, c2)
    dh1 = nn.gelu_backward(nn.dropout_backward(dd1, k1), g1)
    do, g["cls.w1"], g["cls.b1"] = nn.linear_backward(dh1, c1)
    return do, g


def topk_pool(o_cam: np.ndarray, k: int, valid: np.ndarray | None = None):
    """Average the k largest scores along the slot axis, per sample and class.

    Ties go to the lower slot index.  When ``valid`` (``N x n`` bool) is given,
    invalid slots are only chosen once every valid slot has been taken.
    Returns ``(o_pred N x C, topk_idx N x k x C)``.
    """
    N, n, C = o_cam.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    key = -o_cam
    if valid is not None:
        key = np.where(valid[:, :, None], key, np.inf)
    idx = np.argsort(key, axis=1, kind="stable")[:, :k, :]
    picked = np.take_along_axis(o_cam, idx, axis=1)
    return picked.mean(axis=1), idx


def topk_pool_backward(dpred: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    N, k, C = idx.shape
    dcam = np.zeros((N, n, C), dtype=dpred.dtype)
    np.put_along_axis(dcam, idx, np.broadcast_to(dpred[:, None, :] / k, idx.shape), axis=1)
    return dcam


def mil_loss(o_pred: np.ndarray, labels: np.ndarray):
    """Batch-mean softmax cross-entropy; returns ``(loss, dloss/do_pred)``."""
    labels = np.asarray(labels)
    N, C = o_pred.shape
    if labels.shape != (N,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError(f"labels must be {N} class indices in [0, {C})")
    z = o_pred - o_pred.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    grad = probs
    grad[rows, labels] -= 1.0
    return loss, grad / N


def predict(o_pred: np.ndarray) -> np.ndarray:
    """Argmax over classes; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(o_pred, axis=-1)
