import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ettrack import head as hd
from ettrack.head import HeadKind, PenaltyConfig
from ettrack.tensor import ShapeError


class TestXcorr:
    def test_scalar_template_scales_search(self, rng):
        s = rng.standard_normal((1, 5, 6))
        np.testing.assert_allclose(hd.pointwise_xcorr(np.full((1, 1, 1), 2.5), s), 2.5 * s)

    def test_zero_template(self, rng):
        out = hd.pointwise_xcorr(np.zeros((3, 3, 3)), rng.standard_normal((3, 8, 8)))
        np.testing.assert_array_equal(out, 0)

    @pytest.mark.parametrize("dy,dx", [(0, 0), (2, 5), (7, 3)])
    def test_peak_at_template_copy(self, rng, dy, dx):
        t = rng.standard_normal((3, 4, 4))
        t -= t.mean(axis=(1, 2), keepdims=True)
        s = np.zeros((3, 12, 12))
        s[:, dy:dy + 4, dx:dx + 4] = t
        out = hd.pointwise_xcorr(t, s)
        oy, ox = hd.xcorr_offset((4, 4))
        valid = out[:, oy:oy + 9, ox:ox + 9]  # positions with the template fully inside
        for c in range(3):
            assert np.unravel_index(np.argmax(valid[c]), valid[c].shape) == (dy, dx)

    def test_channels_independent(self, rng):
        t = rng.standard_normal((2, 3, 3))
        s = rng.standard_normal((2, 6, 6))
        out = hd.pointwise_xcorr(t, s)
        np.testing.assert_allclose(out[1], hd.pointwise_xcorr(t[1:], s[1:])[0])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            hd.pointwise_xcorr(np.zeros((2, 3, 3)), np.zeros((3, 8, 8)))

    def test_template_too_large(self):
        with pytest.raises(ShapeError, match="larger"):
            hd.pointwise_xcorr(np.zeros((1, 9, 3)), np.zeros((1, 8, 8)))


class TestHeadForward:
    @pytest.mark.parametrize("kind", list(HeadKind))
    def test_output_shapes(self, rng, kind):
        p = hd.init_head(kind, D=8, E=2, D_QK=4, rng=0)
        cls, ltrb = hd.head(rng.standard_normal((8, 5, 7)).astype(np.float32), p)
        assert cls.shape == (1, 5, 7) and ltrb.shape == (4, 5, 7)
        assert np.all(ltrb > 0)

    def test_branch_lengths(self):
        p = hd.init_head(HeadKind.CONV, D=8)
        assert len(p.cls_modules) == 6 and len(p.reg_modules) == 8
        with pytest.raises(ShapeError, match="branches"):
            hd.HeadParams(p.cls_modules[:-2] + p.cls_modules[-1:], p.reg_modules)

    def test_zero_corr_gives_constant_cls(self):
        p = hd.init_head(HeadKind.CONV, D=8, rng=1)
        cls, _ = hd.head(np.zeros((8, 6, 6), np.float32), p)
        np.testing.assert_array_equal(cls, cls[0, 0, 0])

    def test_training_and_inference_forward_agree(self, rng):
        p = hd.init_head(HeadKind.EXEMPLAR, D=8, E=3, D_QK=4, use_tcond=True, rng=2)
        corr = rng.standard_normal((8, 6, 6)).astype(np.float32)
        t = rng.standard_normal(8).astype(np.float32)
        (a, b), _ = hd.head_forward(corr, p, t)
        c, d = hd.head(corr, p, t)
        np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(b, d)

    def test_tcond_ignored_unless_enabled(self, rng):
        p = hd.init_head(HeadKind.EXEMPLAR, D=8, E=3, D_QK=4, rng=3)
        corr = rng.standard_normal((8, 6, 6)).astype(np.float32)
        a = hd.head(corr, p, rng.standard_normal(8).astype(np.float32))
        b = hd.head(corr, p, None)
        np.testing.assert_array_equal(a[0], b[0])

    def test_single_exemplar_head_equals_residual_conv_head(self, rng):
        conv = hd.init_head(HeadKind.CONV, D=8, conv_residual=True, rng=4)
        for m in conv.cls_modules[:-1] + conv.reg_modules[:-1]:
            m.b[:] = rng.standard_normal(8) * 0.1
        ex = hd.conv_head_to_exemplar(conv, D_QK=4, rng=5)
        assert all(m.attn.E == 1 for m in ex.cls_modules[:-1])
        corr = rng.standard_normal((8, 10, 10)).astype(np.float32)
        for u, v in zip(hd.head(corr, conv), hd.head(corr, ex)):
            np.testing.assert_allclose(u, v, atol=1e-5)

    def test_plain_conv_module_has_no_exemplar_counterpart(self):
        with pytest.raises(ValueError, match="residual"):
            hd.conv_head_to_exemplar(hd.init_head(HeadKind.CONV, D=8))

    def test_corr_channel_mismatch(self):
        with pytest.raises(ShapeError, match="correlation"):
            hd.head(np.zeros((4, 6, 6), np.float32), hd.init_head(HeadKind.CONV, D=8))

    def test_parameter_count_grows_with_E(self):
        counts = [hd.init_head(HeadKind.EXEMPLAR, D=8, E=E, D_QK=4).num_parameters() for E in (1, 2, 4, 16)]
        assert counts == sorted(set(counts))

    def test_missing_cache(self):
        with pytest.raises(ValueError, match="cache"):
            hd.head_backward(None, None, None)


class TestBoxes:
    def test_symmetric_distances_give_centered_square(self):
        ltrb = np.full((4, 3, 3), 5.0)
        boxes = hd.decode_boxes(ltrb, 16)
        cx, cy = 16 * 1.5, 16 * 1.5
        np.testing.assert_allclose(boxes[4], [cx - 5, cy - 5, cx + 5, cy + 5])

    def test_first_cell(self):
        boxes = hd.decode_boxes(np.full((4, 2, 2), 8.0), 16, (0.0, 0.0))
        np.testing.assert_allclose(boxes[0], [0, 0, 16, 16])

    def test_right_distance_moves_x2(self):
        ltrb = np.full((4, 1, 1), 3.0)
        x2 = hd.decode_boxes(ltrb, 8)[0, 2]
        ltrb[2] += 0.5
        assert hd.decode_boxes(ltrb, 8)[0, 2] > x2

    @given(st.floats(10, 100), st.floats(10, 100), st.floats(16, 60), st.floats(16, 60))
    def test_encode_decode_round_trip(self, x1, y1, w, h):
        box = (x1, y1, x1 + w, y1 + h)
        ltrb, mask = hd.encode_box(box, 16, 16, 8, (2.0, -3.0))
        boxes = hd.decode_boxes(ltrb, 8, (2.0, -3.0))
        assert mask.any()
        np.testing.assert_allclose(boxes[mask.reshape(-1)], np.tile(box, (mask.sum(), 1)), atol=1e-6)

    def test_mask_is_strict_interior(self):
        _, mask = hd.encode_box((0, 0, 16, 16), 2, 2, 16)
        np.testing.assert_array_equal(mask, [[True, False], [False, False]])


class TestSelectBox:
    def boxes(self, n):
        return np.tile([0.0, 0.0, 10.0, 10.0], (n, 1))

    def test_penalties_off_is_plain_argmax(self, rng):
        cls = rng.standard_normal((1, 4, 4))
        cands = rng.uniform(0, 5, (16, 4)) + [0, 0, 10, 10]
        box, _, i = hd.select_box(cls, cands, [0, 0, 10, 10], PenaltyConfig(0.0, 0.0, 1.0))
        assert i == np.argmax(cls)
        np.testing.assert_array_equal(box, cands[i])

    def test_matching_shape_wins_ties(self):
        cands = np.array([[0, 0, 20.0, 10.0], [0, 0, 10.0, 10.0]])
        for k in (1e-3, 0.04, 5.0):
            _, _, i = hd.select_box(np.zeros((1, 1, 2)), cands, [5, 5, 15.0, 15.0], PenaltyConfig(k, 0.0, 1.0))
            assert i == 1

    def test_full_window_picks_centre(self, rng):
        _, _, i = hd.select_box(rng.standard_normal((1, 5, 5)), self.boxes(25), [0, 0, 10, 10],
                                PenaltyConfig(0.04, 1.0, 1.0))
        assert i == 12

    def test_smoothing(self):
        cands = np.array([[10.0, 10.0, 30.0, 30.0]])
        box, _, _ = hd.select_box(np.zeros((1, 1, 1)), cands, [0, 0, 20.0, 20.0], PenaltyConfig(0.0, 0.0, 0.25))
        np.testing.assert_allclose(box, [2.5, 2.5, 22.5, 22.5])

    @given(st.floats(-20, 20))
    def test_logit_shift_keeps_argmax_without_penalties(self, c):
        rng = np.random.default_rng(0)
        cls = rng.standard_normal((1, 3, 3))
        cfg = PenaltyConfig(0.0, 0.0, 1.0)
        cands = self.boxes(9)
        assert hd.select_box(cls, cands, cands[0], cfg)[2] == hd.select_box(cls + c, cands, cands[0], cfg)[2]
