"""Global and local encoders producing Z_g (N x 1 x D) and Z_l (N x n x D).

Two input modes share one interface:

* precomputed vectors (``d_in > 0``): the global vector is projected
  ``d_in -> D`` and each concept vector goes through a shared two-layer
  per-slot MLP ``d_in -> D -> D``;
* raw pixels (``d_in == 0``): the global image is cut into patches, embedded
  to ``d_global``, mean-pooled to a single token and projected to ``D``; each
  concept crop runs through two non-overlapping strided convolutions
  (``crop/8`` then ``8``) ending in ``D``.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .config import ModelConfig


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    D, std = cfg.d_model, cfg.init_std
    zeros = lambda n: np.zeros(n, dtype=dtype)  # noqa: E731
    p: dict[str, np.ndarray] = {}
    if not cfg.raw:
        p["enc_g.w"] = nn.trunc_normal(rng, (cfg.d_in, D), std, dtype)
        p["enc_g.b"] = zeros(D)
        p["enc_l.w1"] = nn.trunc_normal(rng, (cfg.d_in, D), std, dtype)
        p["enc_l.b1"] = zeros(D)
        p["enc_l.w2"] = nn.trunc_normal(rng, (D, D), std, dtype)
        p["enc_l.b2"] = zeros(D)
        return p
    patch_dim = cfg.patch_size * cfg.patch_size * 3
    p["enc_g.patch_w"] = nn.trunc_normal(rng, (patch_dim, cfg.d_global), std, dtype)
    p["enc_g.patch_b"] = zeros(cfg.d_global)
    p["enc_g.proj_w"] = nn.trunc_normal(rng, (cfg.d_global, D), std, dtype)
    p["enc_g.proj_b"] = zeros(D)
    k1 = cfg.crop_size // 8
    p["enc_l.conv1_w"] = nn.trunc_normal(rng, (k1 * k1 * 3, cfg.crop_channels), std, dtype)
    p["enc_l.conv1_b"] = zeros(cfg.crop_channels)
    p["enc_l.conv2_w"] = nn.trunc_normal(rng, (64 * cfg.crop_channels, D), std, dtype)
    p["enc_l.conv2_b"] = zeros(D)
    return p


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(..., H, W, c) -> (..., H/p * W/p, p*p*c)``, patches in raster order."""
    *lead, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return x.transpose(order).reshape(*lead, gh * gw, patch * patch * c)


def _check_rows(x: np.ndarray, what: str) -> None:
    finite = np.isfinite(x.reshape(x.shape[0], -1)).all(axis=1)
    if not finite.all():
        row = int(np.flatnonzero(~finite)[0])
        raise nn.NonFiniteError(f"non-finite {what} input in batch row {row}")


def encode_global(z_g_in: np.ndarray, params, cfg: ModelConfig):
    """Return ``(Z_g, cache)`` with ``Z_g`` of shape ``N x 1 x D``."""
    _check_rows(z_g_in, "global")
    if not cfg.raw:
        z, c = nn.linear_forward(z_g_in, params["enc_g.w"], params["enc_g.b"])
        return z, ("vec", c)
    patches = patchify(z_g_in, cfg.patch_size)
    emb, c1 = nn.linear_forward(patches, params["enc_g.patch_w"], params["enc_g.patch_b"])
    pooled = emb.mean(axis=1, keepdims=True)
    z, c2 = nn.linear_forward(pooled, params["enc_g.proj_w"], params["enc_g.proj_b"])
    return z, ("raw", c1, c2, emb.shape[1])


def encode_global_backward(dz: np.ndarray, cache) -> dict[str, np.ndarray]:
    if cache[0] == "vec":
        _, dw, db = nn.linear_backward(dz, cache[1])
        return {"enc_g.w": dw, "enc_g.b": db}
    _, c1, c2, tokens = cache
    dpooled, dpw, dpb = nn.linear_backward(dz, c2)
    demb = np.broadcast_to(dpooled / tokens, (dpooled.shape[0], tokens, dpooled.shape[2]))
    _, dew, deb = nn.linear_backward(np.ascontiguousarray(demb), c1)
    return {"enc_g.patch_w": dew, "enc_g.patch_b": deb, "enc_g.proj_w": dpw, "enc_g.proj_b": dpb}


def encode_local(z_l_in: np.ndarray, params, cfg: ModelConfig):
    """Return ``(Z_l, cache)`` with ``Z_l`` of shape ``N x n x D``.

    Each slot is processed independently, padded slots included.
    """
    _check_rows(z_l_in, "local")
    if not cfg.raw:
        h, c1 = nn.linear_forward(z_l_in, params["enc_l.w1"], params["enc_l.b1"])
        a, cg = nn.gelu_forward(h)
        z, c2 = nn.linear_forward(a, params["enc_l.w2"], params["enc_l.b2"])
        return z, ("vec", c1, cg, c2)
    N, n = z_l_in.shape[:2]
    tiles = patchify(z_l_in, cfg.crop_size // 8)  # N x n x 64 x k1*k1*3
    h, c1 = nn.linear_forward(tiles, params["enc_l.conv1_w"], params["enc_l.conv1_b"])
    a, cg = nn.gelu_forward(h)
    flat = a.reshape(N, n, -1)
    z, c2 = nn.linear_forward(flat, params["enc_l.conv2_w"], params["enc_l.conv2_b"])
    return z, ("raw", c1, cg, c2, a.shape)


def encode_local_backward(dz: np.ndarray, cache) -> dict[str, np.ndarray]:
    if cache[0] == "vec":
        _, c1, cg, c2 = cache
        da, dw2, db2 = nn.linear_backward(dz, c2)
        dh = nn.gelu_backward(da, cg)
        _, dw1, db1 = nn.linear_backward(dh, c1)
        return {"enc_l.w1": dw1, "enc_l.b1": db1, "enc_l.w2": dw2, "enc_l.b2": db2}
    _, c1, cg, c2, a_shape = cache
    dflat, dw2, db2 = nn.linear_backward(dz, c2)
    dh = nn.gelu_backward(dflat.reshape(a_shape), cg)
    _, dw1, db1 = nn.linear_backward(dh, c1)
    return {"enc_l.conv1_w": dw1, "enc_l.conv1_b": db1, "enc_l.conv2_w": dw2, "enc_l.conv2_b": db2}
