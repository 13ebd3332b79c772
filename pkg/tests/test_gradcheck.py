import numpy as np

from gaflow import gradcheck
from gaflow.tensor import Tensor, make_result, precision, tsum


def test_suite_passes():
    results = gradcheck.run_suite()
    failed = [str(r) for r in results if not r.passed]
    assert failed == []
    names = {r.name for r in results}
    assert {"conv2d", "warp_with_flow", "ConvGRU cell", "ConvLSTM cell", "residual gate", "Skip-UNet",
            "weighted_cross_entropy", "convgru aggregator", "convlstm aggregator", "residual aggregator"} <= names


def test_wrong_adjoint_is_detected():
    def doubled(x):
        # forward doubles, backward claims a factor of three
        return tsum(make_result("bad", x.data * 2, (x,), lambda g: (g * 3,)))

    with precision("float64"):
        x = Tensor(np.random.default_rng(0).random((3, 3)), requires_grad=True)
        error = gradcheck.check_gradients(doubled, [x])
    assert error > 0.3


def test_correct_adjoint_passes():
    with precision("float64"):
        x = Tensor(np.random.default_rng(0).random((4, 2)), requires_grad=True)
        error = gradcheck.check_gradients(lambda t: tsum(t * t * t), [x])
    assert error < 1e-7


def test_result_formatting():
    assert str(gradcheck.GradcheckResult("conv2d", 1e-9, True)).startswith("ok")
    assert str(gradcheck.GradcheckResult("conv2d", 1e-2, False)).startswith("FAIL")