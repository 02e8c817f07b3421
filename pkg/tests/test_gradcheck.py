import numpy as np
import pytest

from cafusion.gradcheck import GradCheckError, grad_check, relative_error, run_suite


def test_linear_layer_is_nearly_exact():
    rep = grad_check("linear")
    assert rep.max_error <= 1e-8


@pytest.mark.parametrize("selector", ["encoders", "encoders_raw", "fusion", "mil_head", "full", "full_raw"])
def test_selectors_pass(selector):
    rep = grad_check(selector).check()
    assert rep.errors and rep.max_error <= 1e-4


@pytest.mark.parametrize("variant", ["concat1", "concat2", "avg_sum", "local_only", "global_only"])
def test_every_variant_passes(variant):
    assert grad_check("full", variant=variant).ok


def test_corrupted_gradient_is_flagged():
    rep = grad_check("fusion", corrupt=1.01)
    assert not rep.ok
    assert set(rep.offenders) == set(rep.errors)
    with pytest.raises(GradCheckError, match="fusion"):
        rep.check()


def test_unknown_selector():
    with pytest.raises(ValueError):
        grad_check("decoder")


def test_relative_error_scale_free():
    a = np.array([1.0, 2.0])
    assert relative_error(a * 1e6, a * 1e6 * (1 + 1e-7)) == pytest.approx(1e-7, rel=1e-3)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_suite_covers_every_parameter_tensor():
    reports = {r.selector: r for r in run_suite()}
    full = reports["full:ours"].errors
    for name in ("enc_g.w", "enc_l.w1", "fusion.wq", "fusion.wk", "fusion.wv", "fusion.wproj",
                 "fusion.ln_g", "fusion.mlp_w1", "fusion.mlp_b2", "cls.w1", "cls.b3"):
        assert name in full
    assert all(r.ok for r in reports.values())
