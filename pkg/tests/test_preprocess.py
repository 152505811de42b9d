import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petcascade.dataio import BoundingBox, ValidationError
from petcascade.preprocess import (box_round_out, crop_roi, downsample_volume, map_box,
                                   paste_mask, resize_image, scale_box,
                                   upsample_volume_nearest, zscore)


class TestZscore:
    def test_hand_value(self):
        out = zscore(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out, [[-1.224745, 0.0, 1.224745]], atol=1e-6)

    def test_constant_image_is_zero(self):
        assert (zscore(np.full((4, 4), 7.0)) == 0).all()

    def test_mean_zero_std_one(self):
        rng = np.random.default_rng(0)
        img = rng.random((13, 17)).astype(np.float32)
        out = zscore(img)
        assert abs(out.mean()) < 1e-6
        assert abs(out.std() - 1.0) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
    def test_idempotent(self, values):
        img = np.array(values, dtype=np.float64).reshape(1, -1)
        once = zscore(img)
        twice = zscore(once)
        np.testing.assert_allclose(twice, once, atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            zscore(np.zeros((0, 3)))


class TestResize:
    def test_nearest_upscale_blocks(self):
        img = np.array([[1, 0], [0, 0]], dtype=np.uint8)
        out = resize_image(img, (4, 4), "nearest")
        expected = np.zeros((4, 4), dtype=np.uint8)
        expected[:2, :2] = 1
        assert (out == expected).all()

    def test_identity_bit_exact(self):
        rng = np.random.default_rng(1)
        img = rng.random((9, 7)).astype(np.float32)
        for mode in ("nearest", "bilinear"):
            out = resize_image(img, (9, 7), mode)
            assert out.tobytes() == img.tobytes()

    def test_constant_stays_constant(self):
        img = np.full((5, 6), 3.25, dtype=np.float32)
        out = resize_image(img, (11, 4), "bilinear")
        np.testing.assert_allclose(out, 3.25, rtol=1e-7)

    def test_bilinear_hand_value(self):
        # 1x2 -> 1x4: centers at 0.5/4*2-0.5 = -0.25, 0.25, 0.75, 1.25
        img = np.array([[0.0, 1.0]])
        out = resize_image(img, (1, 4), "bilinear")
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)

    def test_nearest_binary_stays_binary(self):
        rng = np.random.default_rng(2)
        mask = (rng.random((10, 12)) < 0.3).astype(np.uint8)
        out = resize_image(mask, (23, 5), "nearest")
        assert set(np.unique(out)) <= {0, 1}
        assert out.dtype == mask.dtype

    def test_unknown_mode(self):
        with pytest.raises(ValidationError):
            resize_image(np.zeros((2, 2)), (3, 3), "cubic")


class TestCropPaste:
    def test_crop_no_margin(self):
        img = np.arange(100, dtype=np.float32).reshape(10, 10)
        patch, eff = crop_roi(img, BoundingBox(2, 2, 5, 5), 0)
        assert patch.shape == (3, 3)
        assert eff.as_tuple() == (2, 2, 5, 5)
        assert (patch == img[2:5, 2:5]).all()

    def test_crop_margin_clipped_at_origin(self):
        img = np.zeros((10, 10))
        _, eff = crop_roi(img, BoundingBox(0, 0, 4, 4), 2)
        assert eff.as_tuple() == (0, 0, 6, 6)

    def test_crop_margin_clipped_at_far_edge(self):
        img = np.zeros((10, 10))
        _, eff = crop_roi(img, BoundingBox(8, 8, 10, 10), 4)
        assert eff.as_tuple() == (4, 4, 10, 10)

    def test_crop_rejects_out_of_bounds_box(self):
        with pytest.raises(ValidationError):
            crop_roi(np.zeros((5, 5)), BoundingBox(2, 2, 7, 4), 0)

    def test_crop_paste_round_trip(self):
        rng = np.random.default_rng(3)
        mask = (rng.random((12, 14)) < 0.4).astype(np.uint8)
        mask[0, :] = 0  # keep a tight interior box
        box = BoundingBox(3, 2, 11, 9)
        patch, eff = crop_roi(mask, box, 0)
        pasted = paste_mask(patch, eff, mask.shape)
        assert (pasted[2:9, 3:11] == mask[2:9, 3:11]).all()
        assert pasted[:2].sum() == 0

    def test_paste_empty_patch(self):
        out = paste_mask(np.zeros((3, 3), dtype=np.uint8), BoundingBox(1, 1, 4, 4), (6, 6))
        assert out.sum() == 0

    def test_paste_or_semantics(self):
        a = paste_mask(np.ones((3, 3), dtype=np.uint8), BoundingBox(0, 0, 3, 3), (5, 5))
        b = paste_mask(np.ones((3, 3), dtype=np.uint8), BoundingBox(1, 1, 4, 4), (5, 5))
        union = a | b
        assert union.sum() == 14  # 9 + 9 - 4 overlap

    def test_paste_dim_mismatch(self):
        with pytest.raises(ValidationError):
            paste_mask(np.ones((2, 2), dtype=np.uint8), BoundingBox(0, 0, 3, 3), (5, 5))


class TestBoxMapping:
    def test_scale_is_pure_edge_scale(self):
        edges = scale_box((2, 4, 6, 8), (16, 16), (32, 32))
        assert edges == (4.0, 8.0, 12.0, 16.0)

    def test_round_out_covers(self):
        box = box_round_out((1.2, 0.6, 3.1, 2.0), (10, 10))
        assert box.as_tuple() == (1, 0, 4, 2)

    def test_map_box_round_trip_contains_original(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x0, y0 = rng.integers(0, 60, 2)
            w, h = rng.integers(1, 30, 2)
            box = BoundingBox(int(x0), int(y0), int(x0 + w), int(y0 + h))
            up = map_box(box, (96, 96), (224, 224))
            back = map_box(up, (224, 224), (96, 96))
            assert back.x_min <= box.x_min and back.y_min <= box.y_min
            assert back.x_max >= box.x_max and back.y_max >= box.y_max

    def test_identity_mapping(self):
        box = BoundingBox(3, 4, 9, 11)
        assert map_box(box, (64, 64), (64, 64)) == box


class TestVolumeResampling:
    def test_downsample_mean_blocks(self):
        vol = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        out = downsample_volume(vol, (1, 1, 1), "mean")
        np.testing.assert_allclose(out, [[[vol.mean()]]])

    def test_nearest_round_trip_preserves_mask_shape(self):
        rng = np.random.default_rng(5)
        mask = (rng.random((8, 12, 12)) < 0.2).astype(np.uint8)
        down = downsample_volume(mask, (4, 6, 6), "nearest")
        up = upsample_volume_nearest(down, (8, 12, 12))
        assert up.shape == (8, 12, 12)
        assert set(np.unique(up)) <= {0, 1}

    def test_identity(self):
        vol = np.random.default_rng(6).random((4, 4, 4)).astype(np.float32)
        assert (downsample_volume(vol, (4, 4, 4)) == vol).all()
