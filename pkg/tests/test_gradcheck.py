import numpy as np
import pytest

from xdcnn import gradcheck
from xdcnn import autodiff as ad
from xdcnn.autodiff import Tensor


def test_rel_err_definition():
    assert gradcheck.rel_err(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert gradcheck.rel_err(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
    # tiny values are judged against the floor, not against each other
    assert gradcheck.rel_err(np.array([1e-9]), np.array([2e-9])) == pytest.approx(1e-3)


def test_numeric_grad_of_quadratic():
    w = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    c = np.array([1.0, 2.0, 3.0])
    num, skipped = gradcheck.numeric_grad(lambda: ad.weighted_sum(ad.relu(w), c), w)
    assert skipped == 0
    assert np.allclose(num, [1.0, 0.0, 3.0], atol=1e-8)


def test_kink_is_skipped():
    w = Tensor(np.array([1e-7, 1.0]), requires_grad=True, dtype=np.float64)
    num, skipped = gradcheck.numeric_grad(lambda: ad.sum_all(ad.relu(w)), w)
    # 1e-7 sits inside the first three step sizes; the fourth one clears it
    assert skipped == 0 and num[0] == pytest.approx(1.0)
    w.data[0] = 1e-12
    num, skipped = gradcheck.numeric_grad(lambda: ad.sum_all(ad.relu(w)), w)
    assert skipped == 1 and np.isnan(num[0])


def test_single_seed_passes():
    report = gradcheck.gradcheck(0)
    assert report.passed, report.lines()
    expected = {"conv2d.1x1", "conv2d.3x3", "conv2d.5x5", "batchnorm.train", "batchnorm.eval", "relu", "add",
                "concat_channels", "center_pixel", "sum_all", "softmax_xent", "net.shared", "net.micro_a", "net.micro_b"}
    assert set(report.errors) == expected
    assert report.thresholds["batchnorm.train"] == 1e-3
    assert all(t == 1e-4 for g, t in report.thresholds.items() if g != "batchnorm.train")


def test_detects_a_wrong_backward(monkeypatch):
    real = ad.relu

    def leaky_grad(x):
        out = real(x)
        node = ad._active_tape.get().nodes[-1] if ad._active_tape.get() else None
        if node is not None:
            inner = node.backward
            node.backward = lambda g: tuple(gi * 1.01 for gi in inner(g))
        return out

    monkeypatch.setattr(ad, "relu", leaky_grad)
    report = gradcheck.GradcheckReport(0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True, dtype=np.float64)
    gradcheck._compare(report, "relu", lambda: ad.sum_all(ad.relu(x)), {"x": x}, 1e-4)
    assert not report.passed
