import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ettrack import head as hd
from ettrack import pipeline as pl
from ettrack.eval import metrics, synth


@pytest.fixture(scope="module")
def still():
    return synth.synth_sequence("translate", length=2, seed=0, speed=0.0)


def oracle_params(**penalty):
    cfg = pl.TrackerConfig(penalty=hd.PenaltyConfig(**penalty)) if penalty else pl.TrackerConfig()
    return pl.TrackerParams(pl.init_backbone("oracle"), pl.MatchedFilterHead(), cfg)


def shifted(frame, box, dx, dy):
    return np.roll(frame, (dy, dx), axis=(0, 1)), np.asarray(box) + [dx, dy, dx, dy]


class TestCropResize:
    def test_inside_crop_copies_pixels(self, rng):
        frame = rng.integers(0, 256, (12, 10, 3), dtype=np.uint8)
        out = pl.crop_resize(frame, (5.0, 6.0), 4, 4)
        np.testing.assert_allclose(out, frame[4:8, 3:7].transpose(2, 0, 1) / 255.0, atol=1e-7)

    def test_outside_crop_is_mean_colour(self, rng):
        frame = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        out = pl.crop_resize(frame, (-100.0, -100.0), 10, 6)
        mean = frame.reshape(-1, 3).mean(axis=0) / 255.0
        np.testing.assert_allclose(out, np.broadcast_to(mean[:, None, None], out.shape), atol=1e-6)

    def test_checkerboard_halved_is_grey(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2 * 255).astype(np.uint8)
        frame = np.repeat(board[:, :, None], 3, axis=2)
        out = pl.crop_resize(frame, (4.0, 4.0), 4, 2)
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    def test_rejects_zero_size(self):
        with pytest.raises(ValueError, match="positive"):
            pl.crop_resize(np.zeros((4, 4, 3), np.uint8), (2, 2), 0, 4)

    def test_deterministic(self, still):
        a = pl.crop_resize(still.frames[0], (50.3, 71.9), 83.1, 64)
        b = pl.crop_resize(still.frames[0], (50.3, 71.9), 83.1, 64)
        assert a.tobytes() == b.tobytes()


class TestGeometry:
    @given(st.floats(-500, 500), st.floats(-500, 500), st.floats(1, 400),
           st.lists(st.floats(-300, 300), min_size=4, max_size=4))
    def test_round_trip(self, cx, cy, size, box):
        geo = pl.CropGeometry(cx, cy, size, 256)
        np.testing.assert_allclose(geo.to_frame(geo.to_crop(box)), box, atol=1e-4)

    def test_crop_centre(self):
        geo = pl.CropGeometry(100, 50, 64, 256)
        np.testing.assert_allclose(geo.to_crop([100, 50, 116, 58]), [128, 128, 192, 160])

    def test_check_box(self):
        with pytest.raises(ValueError, match="invalid box"):
            pl.check_box([5, 5, 5, 10])

    def test_stride_must_divide_crops(self):
        with pytest.raises(Exception, match="stride"):
            pl.TrackerParams(pl.init_backbone("oracle"), pl.MatchedFilterHead(), pl.TrackerConfig(template_px=120))


class TestInitUpdate:
    def test_template_vector_is_channel_mean(self, still):
        s = pl.init(still.frames[0], still.boxes[0], oracle_params())
        assert s.template_features.shape == (3, 8, 8)
        np.testing.assert_allclose(s.template_vector, s.template_features.mean(axis=(1, 2)))

    def test_init_deterministic(self, still):
        a = pl.init(still.frames[0], still.boxes[0], oracle_params())
        b = pl.init(still.frames[0], still.boxes[0], oracle_params())
        np.testing.assert_array_equal(a.template_features, b.template_features)
        np.testing.assert_array_equal(a.prev_box, b.prev_box)

    def test_init_rejects_bad_box(self, still):
        with pytest.raises(ValueError):
            pl.init(still.frames[0], [10, 10, 5, 20], oracle_params())

    def test_static_frame(self, still):
        p = oracle_params()
        s = pl.init(still.frames[0], still.boxes[0], p)
        _, box = pl.update(s, still.frames[0], p)
        assert metrics.iou(box, still.boxes[0]) > 0.9

    @pytest.mark.parametrize("d", [(6, 0), (10, -8), (-15, 12), (25, 0), (0, 35), (40, -40)])
    def test_translation_within_half_cell(self, still, d):
        p = oracle_params(window_influence=0.0, lr=1.0)
        s = pl.init(still.frames[0], still.boxes[0], p)
        frame, gt = shifted(still.frames[0], still.boxes[0], *d)
        s2, box = pl.update(s, frame, p)
        cell = p.backbone.stride / s2.search.scale  # stride in frame pixels
        err = np.abs(np.subtract(pl.box_center(box), pl.box_center(gt)))
        assert np.all(err <= cell / 2 + 1)

    def test_same_frames_same_boxes(self, still):
        p = oracle_params()
        a = pl.track_sequence(still.frames, still.boxes[0], p)
        b = pl.track_sequence(still.frames, still.boxes[0], p)
        np.testing.assert_array_equal(a, b)

    def test_lost_target_stays_in_search_region(self, still):
        p = oracle_params()
        s = pl.init(still.frames[0], still.boxes[0], p)
        frame, gt = shifted(still.frames[0], still.boxes[0], 200, 0)
        s2, box = pl.update(s, frame, p)
        assert metrics.iou(box, gt) == 0.0
        cx, cy = pl.box_center(box)
        assert abs(cx - s2.search.cx) <= s2.search.size / 2 and abs(cy - s2.search.cy) <= s2.search.size / 2

    @pytest.mark.parametrize("motion", ["translate", "scale", "turn"])
    def test_boxes_keep_positive_area(self, motion):
        seq = synth.synth_sequence(motion, length=12, seed=3)
        boxes = pl.track_sequence(seq.frames, seq.boxes[0], oracle_params())
        assert np.all(boxes[:, 2] > boxes[:, 0]) and np.all(boxes[:, 3] > boxes[:, 1])

    def test_template_vector_unused_without_tcond(self, still):
        head = hd.init_head(hd.HeadKind.EXEMPLAR, D=3, E=2, D_QK=4, rng=0)
        p = pl.TrackerParams(pl.init_backbone("oracle"), head)
        s = pl.init(still.frames[0], still.boxes[0], p)
        _, a = pl.update(s, still.frames[1], p)
        s.template_vector = s.template_vector + 7.0
        _, b = pl.update(s, still.frames[1], p)
        np.testing.assert_array_equal(a, b)

    def test_template_vector_used_with_tcond(self, still):
        head = hd.init_head(hd.HeadKind.EXEMPLAR, D=3, E=2, D_QK=4, use_tcond=True, rng=0)
        p = pl.TrackerParams(pl.init_backbone("oracle"), head, pl.TrackerConfig(penalty=hd.PenaltyConfig(0, 0, 1)))
        s = pl.init(still.frames[0], still.boxes[0], p)
        cls_a = hd.head(hd.pointwise_xcorr(s.template_features, s.template_features), head, s.template_vector)[0]
        cls_b = hd.head(hd.pointwise_xcorr(s.template_features, s.template_features), head, s.template_vector + 7)[0]
        assert not np.allclose(cls_a, cls_b)

    def test_head_width_must_match_backbone(self):
        with pytest.raises(Exception, match="backbone channels"):
            pl.TrackerParams(pl.init_backbone("oracle"), hd.init_head(hd.HeadKind.CONV, D=8))


class TestBackbone:
    def test_toy_stride(self, rng):
        p = pl.init_backbone("toy", rng=0)
        out = pl.backbone_forward(rng.random((3, 128, 128)).astype(np.float32), p)
        assert out.shape == (128, 8, 8)

    def test_oracle_is_block_mean(self, rng):
        img = rng.random((3, 32, 32))
        out = pl.backbone_forward(img, pl.init_backbone("oracle"))
        np.testing.assert_allclose(out[:, 1, 0], img[:, 16:32, 0:16].mean(axis=(1, 2)))

    def test_rejects_indivisible(self):
        with pytest.raises(Exception, match="multiples"):
            pl.backbone_forward(np.zeros((3, 20, 32)), pl.init_backbone("oracle"))
