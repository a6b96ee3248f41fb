import numpy as np
import pytest

from ettrack import gradcheck as gc
from ettrack import tensor as T


class TestGradcheck:
    def test_cheap_cases_pass(self):
        cases = ["conv2d.strided", "softmax", "layernorm.columns", "exemplar_attention.S2_tcond", "loss.iou"]
        report = gc.run_gradcheck(cases)
        assert report["passed"], report["failures"]
        assert set(report["cases"]) == set(cases)
        assert report["max_rel_error"] < gc.TOLERANCE

    def test_corrupted_backward_is_named(self, monkeypatch):
        real = T.layernorm_backward

        def off_by_one_percent(dout, cache):
            dx, dgamma, dbeta = real(dout, cache)
            return dx, dgamma * 1.01, dbeta

        monkeypatch.setattr(T, "layernorm_backward", off_by_one_percent)
        report = gc.run_gradcheck(["layernorm.rows"])
        assert not report["passed"]
        assert report["failures"] == ["layernorm.rows:gamma"]

    def test_float64_only(self):
        with pytest.raises(ValueError, match="float64"):
            gc.run_gradcheck(["softmax"], dtype=np.float32)

    def test_unknown_case(self):
        with pytest.raises(KeyError):
            gc.run_gradcheck(["nope"])

    def test_rel_error(self):
        assert gc.rel_error([1.0, 0.0], [1.0, 0.0]) == 0.0
        assert gc.rel_error([0.0], [0.0]) == 0.0
        assert gc.rel_error([2.0], [1.0]) == pytest.approx(0.5)

    def test_kinks_are_skipped(self, rng):
        # |x| through a ReLU pair: the coordinate at 0 straddles the kink
        inputs = {"x": np.array([0.0, 1.0, -2.0])}

        def fn(p):
            out, cache = T.relu_forward(p["x"])
            return out, lambda d: {"x": T.relu_backward(d, cache)}

        skipped = {}
        errs = gc.check_case(fn, inputs, rng, skipped=skipped)
        assert skipped == {"x": 1}
        assert errs["x"] < 1e-9
