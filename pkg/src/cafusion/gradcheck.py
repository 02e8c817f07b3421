"""Central finite-difference checks of the analytic backward passes.

Each selector builds a small float64 instance (default N=2, n=4, D=8, H=2,
C=3), a scalar loss and its analytic gradient, then compares every tensor
element against ``(L(x+h) - L(x-h)) / 2h``.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import encoders, fusion, mil_head, model, nn
from .config import ModelConfig

SELECTORS = ("linear", "encoders", "encoders_raw", "fusion", "mil_head", "full", "full_raw")


class GradCheckError(AssertionError):
    pass


@dataclass(frozen=True)
class Instance:
    N: int = 2
    n: int = 4
    D: int = 8
    H: int = 2
    C: int = 3
    d_in: int = 6
    k: int = 2
    seed: int = 0
    scale: float = 0.5  # weight std; large enough that nonlinearities are exercised


@dataclass
class GradCheckReport:
    selector: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def offenders(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.offenders

    def check(self) -> "GradCheckReport":
        if not self.ok:
            worst = ", ".join(f"{k}={self.errors[k]:.3g}" for k in self.offenders)
            raise GradCheckError(f"{self.selector}: gradients exceed {self.tolerance:g}: {worst}")
        return self

    def lines(self) -> list[str]:
        return [f"{self.selector:>12s} {name:<22s} {err:.3e}" for name, err in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max absolute deviation over the larger of the two max magnitudes.

    ``floor`` bounds the denominator from below.  Some gradients vanish
    identically (a bias shared by every concept slot shifts all attention
    logits equally, and softmax ignores that), leaving only FD round-off.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(loss: Callable[[], float], x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss()
        flat[i] = orig - h
        down = loss()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def check_tensors(
    tensors: dict[str, np.ndarray],
    loss: Callable[[], float],
    grads: Callable[[], dict[str, np.ndarray]],
    h: float = 1e-5,
) -> dict[str, float]:
    """Compare ``grads()`` with finite differences of ``loss()`` for every tensor.

    ``loss`` and ``grads`` must read the arrays in ``tensors`` in place.
    """
    analytic = grads()
    # tensors are never judged against less than 0.1% of the largest gradient in the case
    floor = 1e-3 * max(float(np.abs(g).max(initial=0.0)) for g in analytic.values())
    return {
        name: relative_error(analytic[name], numeric_grad(loss, x, h), max(floor, 1e-12))
        for name, x in tensors.items()
    }


def _rescale(params: dict[str, np.ndarray], rng, scale: float) -> dict[str, np.ndarray]:
    out = {}
    for name, p in params.items():
        if name.endswith("ln_g"):
            out[name] = 1.0 + 0.1 * rng.standard_normal(p.shape)
        else:
            out[name] = scale * rng.standard_normal(p.shape)
    return out


def _model_cfg(inst: Instance, **kw) -> ModelConfig:
    base = dict(
        d_in=inst.d_in, d_model=inst.D, heads=inst.H, num_classes=inst.C, n_concepts=inst.n,
        k=inst.k, fusion_dropout=0.0, classifier_dropout=0.0, d_global=6, image_size=16,
        patch_size=8, crop_size=8, crop_channels=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def _case_linear(inst: Instance, rng):
    x = rng.standard_normal((inst.N, inst.n, inst.D))
    r = rng.standard_normal((inst.N, inst.n, inst.C))
    t = {"w": rng.standard_normal((inst.D, inst.C)), "b": rng.standard_normal(inst.C)}

    def loss():
        return float((nn.linear_forward(x, t["w"], t["b"])[0] * r).sum())

    def grads():
        _, dw, db = nn.linear_backward(r, nn.linear_forward(x, t["w"], t["b"])[1])
        return {"w": dw, "b": db}

    return t, loss, grads


def _case_encoders(inst: Instance, rng, raw: bool):
    cfg = _model_cfg(inst, d_in=0 if raw else inst.d_in)
    params = _rescale(encoders.init_params(cfg, rng, np.float64), rng, inst.scale)
    if raw:
        zg_in = rng.random((inst.N, cfg.image_size, cfg.image_size, 3))
        zl_in = rng.random((inst.N, inst.n, cfg.crop_size, cfg.crop_size, 3))
    else:
        zg_in = rng.standard_normal((inst.N, 1, inst.d_in))
        zl_in = rng.standard_normal((inst.N, inst.n, inst.d_in))
    rg = rng.standard_normal((inst.N, 1, inst.D))
    rl = rng.standard_normal((inst.N, inst.n, inst.D))

    def loss():
        zg, _ = encoders.encode_global(zg_in, params, cfg)
        zl, _ = encoders.encode_local(zl_in, params, cfg)
        return float((zg * rg).sum() + (zl * rl).sum())

    def grads():
        _, cg = encoders.encode_global(zg_in, params, cfg)
        _, cl = encoders.encode_local(zl_in, params, cfg)
        g = encoders.encode_global_backward(rg, cg)
        g.update(encoders.encode_local_backward(rl, cl))
        return g

    return params, loss, grads


def _case_fusion(inst: Instance, rng, residual: str = "global"):
    cfg = _model_cfg(inst, fusion_residual=residual)
    t = _rescale(fusion.init_params(cfg, rng, np.float64), rng, inst.scale)
    t["input.z_l"] = rng.standard_normal((inst.N, inst.n, inst.D))
    t["input.z_g"] = rng.standard_normal((inst.N, 1, inst.D))
    r = rng.standard_normal((inst.N, inst.n, inst.D))

    def loss():
        o, _, _ = fusion.fuse(t["input.z_l"], t["input.z_g"], t, cfg)
        return float((o * r).sum())

    def grads():
        _, _, cache = fusion.fuse(t["input.z_l"], t["input.z_g"], t, cfg)
        dz_l, dz_g, g = fusion.fuse_backward(r, cache)
        g["input.z_l"], g["input.z_g"] = dz_l, dz_g
        return g

    return t, loss, grads


def _case_mil_head(inst: Instance, rng):
    cfg = _model_cfg(inst)
    t = _rescale(mil_head.init_params(cfg, rng, np.float64), rng, inst.scale)
    t["input.o"] = rng.standard_normal((inst.N, inst.n, inst.D))
    labels = rng.integers(0, inst.C, inst.N)

    def loss():
        cam, _ = mil_head.classify(t["input.o"], t)
        pred, _ = mil_head.topk_pool(cam, inst.k)
        return mil_head.mil_loss(pred, labels)[0]

    def grads():
        cam, cache = mil_head.classify(t["input.o"], t)
        pred, idx = mil_head.topk_pool(cam, inst.k)
        _, dpred = mil_head.mil_loss(pred, labels)
        do, g = mil_head.classify_backward(mil_head.topk_pool_backward(dpred, idx, inst.n), cache)
        g["input.o"] = do
        return g

    return t, loss, grads


def _case_full(inst: Instance, rng, variant: str = "ours", raw: bool = False, residual: str = "global"):
    cfg = _model_cfg(inst, variant=variant, d_in=0 if raw else inst.d_in, fusion_residual=residual)
    params = _rescale(model.init_params(cfg, int(rng.integers(2**31)), np.float64), rng, inst.scale)
    if raw:
        zg_in = rng.random((inst.N, cfg.image_size, cfg.image_size, 3))
        zl_in = rng.random((inst.N, inst.n, cfg.crop_size, cfg.crop_size, 3))
    else:
        zg_in = rng.standard_normal((inst.N, 1, inst.d_in))
        zl_in = rng.standard_normal((inst.N, inst.n, inst.d_in))
    valid = np.ones((inst.N, inst.n), dtype=bool)
    labels = rng.integers(0, inst.C, inst.N)

    def loss():
        out, _ = model.forward(params, zg_in, zl_in, valid, cfg)
        return mil_head.mil_loss(out.o_pred, labels)[0]

    def grads():
        return model.loss_and_grads(params, zg_in, zl_in, valid, labels, cfg)[1]

    return params, loss, grads


def grad_check(
    selector: str = "full",
    instance: Instance | None = None,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    variant: str = "ours",
    corrupt: float | None = None,
    fusion_residual: str = "global",
) -> GradCheckReport:
    """Run one finite-difference check and return its report.

    ``corrupt`` multiplies the analytic gradients by a factor, which a sound
    harness must flag.
    """
    inst = instance or Instance()
    rng = np.random.default_rng(inst.seed)
    start = time.perf_counter()
    if selector == "linear":
        tensors, loss, grads = _case_linear(inst, rng)
    elif selector in ("encoders", "encoders_raw"):
        tensors, loss, grads = _case_encoders(inst, rng, raw=selector == "encoders_raw")
    elif selector == "fusion":
        tensors, loss, grads = _case_fusion(inst, rng, fusion_residual)
    elif selector == "mil_head":
        tensors, loss, grads = _case_mil_head(inst, rng)
    elif selector in ("full", "full_raw"):
        tensors, loss, grads = _case_full(inst, rng, variant, selector == "full_raw", fusion_residual)
    else:
        raise ValueError(f"unknown selector {selector!r}; expected one of {SELECTORS}")
    if corrupt is not None:
        clean = grads
        grads = lambda: {k: v * corrupt for k, v in clean().items()}  # noqa: E731
    errors = check_tensors(tensors, loss, grads, h)
    return GradCheckReport(selector, tolerance, errors, time.perf_counter() - start)


def run_suite(tolerance: float = 1e-4, instance: Instance | None = None) -> list[GradCheckReport]:
    """Every selector plus the full model under each fusion variant."""
    from .config import VARIANTS

    reports = [grad_check(s, instance, tolerance) for s in SELECTORS if not s.startswith("full")]
    reports.append(grad_check("full_raw", instance, tolerance))
    for v in VARIANTS:
        rep = grad_check("full", instance, tolerance, variant=v)
        reports.append(dataclasses.replace(rep, selector=f"full:{v}"))
    for s in ("fusion", "full"):
        rep = grad_check(s, instance, tolerance, fusion_residual="local")
        reports.append(dataclasses.replace(rep, selector=f"{s}:local_residual"))
    return reports
