"""Full forward/backward pass: encode -> fuse -> classify -> top-k -> loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoders, fusion, mil_head
from .config import ModelConfig


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights ~ truncated N(0, init_std), biases 0, LayerNorm 1/0."""
    rng = np.random.default_rng(seed)
    params = encoders.init_params(cfg, rng, dtype)
    params.update(fusion.init_params(cfg, rng, dtype))
    params.update(mil_head.init_params(cfg, rng, dtype))
    if cfg.variant == "global_only":
        params = {k: v for k, v in params.items() if not k.startswith("enc_l.")}
    elif cfg.variant == "local_only":
        params = {k: v for k, v in params.items() if not k.startswith("enc_g.")}
    return params


@dataclass
class Outputs:
    o_cam: np.ndarray  # N x slots x C
    o_pred: np.ndarray  # N x C
    topk_idx: np.ndarray  # N x k x C
    attention: dict | None = None
    fused: np.ndarray | None = None  # classifier input, N x slots x D'


def _slot_valid(valid: np.ndarray, cfg: ModelConfig) -> np.ndarray | None:
    if not cfg.mask_padded_topk:
        return None
    if cfg.variant == "concat1":
        return np.concatenate([valid, np.ones((valid.shape[0], 1), dtype=bool)], axis=1)
    if cfg.variant in ("ours", "local_only", "concat2"):
        return valid
    return None


def forward(params, z_g_in, z_l_in, valid, cfg: ModelConfig, rng=None):
    """Return ``(Outputs, cache)``; pass ``rng`` to enable dropout (training mode)."""
    variant = cfg.variant
    z_g = c_g = z_l = c_l = None
    if variant != "local_only":
        z_g, c_g = encoders.encode_global(z_g_in, params, cfg)
    if variant != "global_only":
        z_l, c_l = encoders.encode_local(z_l_in, params, cfg)
    attention = None
    if variant == "ours":
        fused, attention, c_f = fusion.fuse(z_l, z_g, params, cfg, rng)
    else:
        zl = z_l if z_l is not None else np.zeros((z_g.shape[0], 1, z_g.shape[2]), z_g.dtype)
        zg = z_g if z_g is not None else np.zeros((z_l.shape[0], 1, z_l.shape[2]), z_l.dtype)
        fused, c_f = fusion.fuse_ablation(variant, zl, zg), None
    o_cam, c_c = mil_head.classify(fused, params, cfg.classifier_dropout, rng)
    slot_valid = _slot_valid(np.asarray(valid, dtype=bool), cfg) if valid is not None else None
    o_pred, idx = mil_head.topk_pool(o_cam, cfg.effective_k, slot_valid)
    n = z_l.shape[1] if z_l is not None else 1
    out = Outputs(o_cam=o_cam, o_pred=o_pred, topk_idx=idx, attention=attention, fused=fused)
    return out, (variant, c_g, c_l, c_f, c_c, idx, o_cam.shape[1], n)


def backward(dpred: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Gradients of every parameter given ``dloss/do_pred``."""
    variant, c_g, c_l, c_f, c_c, idx, slots, n = cache
    dcam = mil_head.topk_pool_backward(dpred, idx, slots)
    dfused, grads = mil_head.classify_backward(dcam, c_c)
    if variant == "ours":
        dz_l, dz_g, g = fusion.fuse_backward(dfused, c_f)
        grads.update(g)
    else:
        dz_l, dz_g = fusion.fuse_ablation_backward(variant, dfused, n)
    if c_g is not None and dz_g is not None:
        grads.update(encoders.encode_global_backward(dz_g, c_g))
    if c_l is not None and dz_l is not None:
        grads.update(encoders.encode_local_backward(dz_l, c_l))
    return grads


def loss_and_grads(params, z_g_in, z_l_in, valid, labels, cfg: ModelConfig, rng=None):
    out, cache = forward(params, z_g_in, z_l_in, valid, cfg, rng)
    loss, dpred = mil_head.mil_loss(out.o_pred, labels)
    return loss, backward(dpred, cache), out
