"""Cross-attentive fusion of concept tokens with the global token.

Concept tokens are queries, the single global token supplies key and value::

    M = Q K^T / sqrt(n)            (per head, N x n x 1)
    A = softmax over the n concepts
    I = Z_g + Drop(concat_h(A_h V_h) W_proj)     (Z_l instead of Z_g with fusion_residual="local")
    O = I + MLP(LN(I))

plus the simpler fusion baselines used in ablations.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .config import ModelConfig

ABLATION_VARIANTS = ("concat1", "concat2", "avg_sum", "local_only", "global_only")


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    if cfg.variant != "ours":
        return {}
    D, std = cfg.d_model, cfg.init_std
    return {
        "fusion.wq": nn.trunc_normal(rng, (D, D), std, dtype),
        "fusion.wk": nn.trunc_normal(rng, (D, D), std, dtype),
        "fusion.wv": nn.trunc_normal(rng, (D, D), std, dtype),
        "fusion.wproj": nn.trunc_normal(rng, (D, D), std, dtype),
        "fusion.ln_g": np.ones(D, dtype=dtype),
        "fusion.ln_b": np.zeros(D, dtype=dtype),
        "fusion.mlp_w1": nn.trunc_normal(rng, (D, 4 * D), std, dtype),
        "fusion.mlp_b1": np.zeros(4 * D, dtype=dtype),
        "fusion.mlp_w2": nn.trunc_normal(rng, (4 * D, D), std, dtype),
        "fusion.mlp_b2": np.zeros(D, dtype=dtype),
    }


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    N, t, D = x.shape
    return x.reshape(N, t, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    N, H, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(N, t, H * dk)


def _scale(n: int, dk: int, mode: str) -> float:
    return float(np.sqrt(n if mode == "sqrt_n" else dk))


def _check_shapes(z_l: np.ndarray, z_g: np.ndarray) -> None:
    if z_l.ndim != 3 or z_g.ndim != 3 or z_g.shape[1] != 1:
        raise ValueError(f"expected Z_l N x n x D and Z_g N x 1 x D, got {z_l.shape} and {z_g.shape}")
    if z_l.shape[0] != z_g.shape[0] or z_l.shape[2] != z_g.shape[2]:
        raise ValueError(f"Z_l {z_l.shape} and Z_g {z_g.shape} disagree on N or D")


def attention_logits(z_l, z_g, params, heads: int, scale: str = "sqrt_n"):
    """Pre-softmax attention map, shape ``N x H x n x 1``."""
    _check_shapes(z_l, z_g)
    q = _split_heads(z_l @ params["fusion.wq"], heads)
    k = _split_heads(z_g @ params["fusion.wk"], heads)
    s = _scale(z_l.shape[1], q.shape[-1], scale)
    return q @ k.transpose(0, 1, 3, 2) / s


def attention_normalize(logits: np.ndarray) -> np.ndarray:
    """Softmax over the concept axis (axis 2), separately per sample and head."""
    return nn.softmax(logits, axis=2)


def fuse(z_l, z_g, params, cfg: ModelConfig, rng=None):
    """Return ``(O, attention, cache)``.

    ``attention`` is a dict with ``weights`` and ``logits`` (``N x H x n x 1``).
    Dropout runs only when a generator is passed.
    """
    _check_shapes(z_l, z_g)
    H = cfg.heads
    n = z_l.shape[1]
    wq, wk, wv = params["fusion.wq"], params["fusion.wk"], params["fusion.wv"]
    q = _split_heads(z_l @ wq, H)
    k = _split_heads(z_g @ wk, H)
    v = _split_heads(z_g @ wv, H)
    s = _scale(n, q.shape[-1], cfg.attention_scale)
    logits = q @ k.transpose(0, 1, 3, 2) / s
    nn.check_finite(logits, "attention logits")
    weights = nn.softmax(logits, axis=2)
    heads_out = _merge_heads(weights * v)  # N x n x D
    attn, c_proj = nn.linear_forward(heads_out, params["fusion.wproj"])
    dropped, keep = nn.dropout_forward(attn, cfg.fusion_dropout, rng)
    inter = (z_l if cfg.fusion_residual == "local" else z_g) + dropped
    nn.check_finite(inter, "fusion residual I")
    ln, c_ln = nn.layernorm_forward(inter, params["fusion.ln_g"], params["fusion.ln_b"])
    h, c_m1 = nn.linear_forward(ln, params["fusion.mlp_w1"], params["fusion.mlp_b1"])
    a, c_g = nn.gelu_forward(h)
    m, c_m2 = nn.linear_forward(a, params["fusion.mlp_w2"], params["fusion.mlp_b2"])
    out = inter + m
    nn.check_finite(out, "fusion output O")
    cache = (z_l, z_g, q, k, v, s, weights, c_proj, keep, c_ln, c_m1, c_g, c_m2, params, cfg.fusion_residual)
    return out, {"weights": weights, "logits": logits}, cache


def fuse_backward(dout, cache):
    """Return ``(dZ_l, dZ_g, grads)`` for the fusion block."""
    z_l, z_g, q, k, v, s, weights, c_proj, keep, c_ln, c_m1, c_g, c_m2, params, residual = cache
    H = q.shape[1]
    g: dict[str, np.ndarray] = {}
    da, g["fusion.mlp_w2"], g["fusion.mlp_b2"] = nn.linear_backward(dout, c_m2)
    dh = nn.gelu_backward(da, c_g)
    dln, g["fusion.mlp_w1"], g["fusion.mlp_b1"] = nn.linear_backward(dh, c_m1)
    dinter, g["fusion.ln_g"], g["fusion.ln_b"] = nn.layernorm_backward(dln, c_ln)
    dinter = dinter + dout
    local_res = residual == "local"
    dz_g = np.zeros_like(z_g) if local_res else dinter.sum(axis=1, keepdims=True)
    dattn = nn.dropout_backward(dinter, keep)
    dheads, g["fusion.wproj"], _ = nn.linear_backward(dattn, c_proj)
    dheads = _split_heads(dheads, H)  # N x H x n x dk
    dweights = (dheads * v).sum(axis=-1, keepdims=True)
    dv = (dheads * weights).sum(axis=2, keepdims=True)
    dlogits = nn.softmax_backward(dweights, weights, axis=2) / s
    dq = dlogits @ k
    dk = dlogits.transpose(0, 1, 3, 2) @ q
    dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    g["fusion.wq"] = z_l.reshape(-1, z_l.shape[-1]).T @ dq_m.reshape(-1, dq_m.shape[-1])
    g["fusion.wk"] = z_g.reshape(-1, z_g.shape[-1]).T @ dk_m.reshape(-1, dk_m.shape[-1])
    g["fusion.wv"] = z_g.reshape(-1, z_g.shape[-1]).T @ dv_m.reshape(-1, dv_m.shape[-1])
    dz_l = dq_m @ params["fusion.wq"].T
    if local_res:
        dz_l = dz_l + dinter
    dz_g = dz_g + dk_m @ params["fusion.wk"].T + dv_m @ params["fusion.wv"].T
    return dz_l, dz_g, g


def fuse_ablation(variant: str, z_l: np.ndarray, z_g: np.ndarray) -> np.ndarray:
    """Parameter-free fusion baselines.

    ``concat1`` appends the global token after the n concept tokens, so slot
    indices below n still name concepts.
    """
    _check_shapes(z_l, z_g)
    if variant == "concat1":
        return np.concatenate([z_l, z_g], axis=1)
    if variant == "concat2":
        return np.concatenate([z_l, np.broadcast_to(z_g, z_l.shape)], axis=2)
    if variant == "avg_sum":
        return z_l.mean(axis=1, keepdims=True) + z_g
    if variant == "local_only":
        return z_l
    if variant == "global_only":
        return z_g
    raise ValueError(f"unknown fusion variant {variant!r}; expected one of {ABLATION_VARIANTS}")


def fuse_ablation_backward(variant: str, dout: np.ndarray, n: int):
    """Return ``(dZ_l, dZ_g)``; ``dZ_l`` is None for ``global_only``."""
    if variant == "concat1":
        return dout[:, :n], dout[:, n:]
    if variant == "concat2":
        D = dout.shape[2] // 2
        return dout[:, :, :D], dout[:, :, D:].sum(axis=1, keepdims=True)
    if variant == "avg_sum":
        return np.repeat(dout / n, n, axis=1), dout
    if variant == "local_only":
        return dout, None
    if variant == "global_only":
        return None, dout
    raise ValueError(f"unknown fusion variant {variant!r}")
