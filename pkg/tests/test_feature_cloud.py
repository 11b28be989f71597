"""Feature-grid encoding, coordinate attachment, and pyramid pooling."""

import numpy as np
import pytest

from cloudtrack import feature_cloud as fc
from cloudtrack import nn
from cloudtrack.errors import ConfigError, FormatError, ShapeError


class TestEncoderConfig:
    def test_defaults(self):
        cfg = fc.EncoderConfig()
        assert cfg.downsample == int(np.prod(cfg.strides))
        assert cfg.out_channels == cfg.channels[-1]

    def test_dict_round_trip(self):
        cfg = fc.EncoderConfig(channels=(8, 16), strides=(2, 2), kernel_size=5)
        assert fc.EncoderConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(channels=(8,), strides=(2, 2)),
            dict(channels=(), strides=()),
            dict(channels=(0, 8), strides=(2, 2)),
            dict(channels=(8, 8), strides=(2, 0)),
            dict(kernel_size=4),
            dict(kernel_size=-1),
        ],
    )
    def test_rejects_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            fc.EncoderConfig(**kwargs)


class TestGridShapes:
    def test_grid_shape_ceil(self):
        assert fc.grid_shape(48, 64, 4) == (12, 16)
        assert fc.grid_shape(49, 65, 4) == (13, 17)
        assert fc.grid_shape(1, 1, 4) == (1, 1)

    def test_level_shapes_halve_with_ceil(self):
        assert fc.level_shapes(12, 16, 3) == [(12, 16), (6, 8), (3, 4)]
        assert fc.level_shapes(13, 17, 2) == [(13, 17), (7, 9)]

    def test_level_shapes_rejects_collapse(self):
        with pytest.raises(ConfigError):
            fc.level_shapes(2, 2, 3)  # 4 cells cannot support 3 halvings
        with pytest.raises(ConfigError):
            fc.level_shapes(4, 4, 0)
        with pytest.raises(ConfigError):
            fc.level_shapes(0, 4, 1)


class TestEncodeFrame:
    def test_output_grid_matches_downsample(self):
        cfg = fc.EncoderConfig()
        params = nn.ParamStore(seed=3)
        rgb = np.random.default_rng(0).integers(0, 256, (18, 26, 3), dtype=np.uint8)
        feats = fc.encode_frame(rgb, params, cfg)
        gh, gw = fc.grid_shape(18, 26, cfg.downsample)
        assert feats.shape == (gh, gw, cfg.out_channels)

    def test_uint8_matches_unit_floats(self):
        cfg = fc.EncoderConfig(channels=(6, 8), strides=(2, 2))
        rgb = np.random.default_rng(1).integers(0, 256, (12, 12, 3), dtype=np.uint8)
        a = fc.encode_frame(rgb, nn.ParamStore(seed=5), cfg)
        b = fc.encode_frame(rgb.astype(np.float32) / 255.0, nn.ParamStore(seed=5), cfg)
        np.testing.assert_array_equal(a.data, b.data)

    def test_constant_image_gives_constant_features(self):
        # replicate padding means a flat color has no detectable borders
        cfg = fc.EncoderConfig(channels=(6, 8), strides=(2, 2))
        rgb = np.full((16, 20, 3), 0.37, dtype=np.float32)
        feats = fc.encode_frame(rgb, nn.ParamStore(seed=2), cfg).data
        np.testing.assert_allclose(
            feats, np.broadcast_to(feats[:1, :1, :], feats.shape), rtol=0, atol=1e-6
        )

    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            fc.encode_frame(np.zeros((8, 8)), nn.ParamStore(), fc.EncoderConfig())

    def test_deterministic_for_seed(self):
        cfg = fc.EncoderConfig(channels=(6, 8), strides=(2, 2))
        rgb = np.random.default_rng(4).random((10, 14, 3), dtype=np.float32)
        a = fc.encode_frame(rgb, nn.ParamStore(seed=9), cfg).data
        b = fc.encode_frame(rgb, nn.ParamStore(seed=9), cfg).data
        np.testing.assert_array_equal(a, b)


class TestExternalFeatures:
    def test_accepts_matching_grid(self):
        feats = np.random.default_rng(0).random((5, 7, 4)).astype(np.float64)
        t = fc.features_from_external(feats, image_hw=(20, 28), stride=4)
        assert t.data.dtype == np.float32
        assert t.shape == (5, 7, 4)

    def test_rejects_wrong_grid(self):
        with pytest.raises(FormatError):
            fc.features_from_external(np.zeros((5, 7, 4)), image_hw=(24, 28), stride=4)

    def test_rejects_wrong_rank_or_channels(self):
        with pytest.raises(FormatError):
            fc.features_from_external(np.zeros((5, 7)), image_hw=(20, 28), stride=4)
        with pytest.raises(FormatError):
            fc.features_from_external(
                np.zeros((5, 7, 4)), image_hw=(20, 28), stride=4, expected_channels=8
            )


class TestAttachCoordinates:
    def test_top_left_anchor(self):
        h, w, stride = 9, 10, 4
        pm = np.arange(h * w * 3, dtype=np.float64).reshape(h, w, 3)
        valid = np.zeros((h, w), dtype=bool)
        valid[0, 0] = valid[4, 8] = True
        coords, cell_valid = fc.attach_coordinates(pm, valid, stride)
        gh, gw = fc.grid_shape(h, w, stride)
        assert coords.shape == (gh * gw, 3)
        assert cell_valid.shape == (gh * gw,)
        # cell (i, j) anchors at pixel (i*stride, j*stride)
        for ci in range(gh):
            for cj in range(gw):
                np.testing.assert_array_equal(
                    coords[ci * gw + cj], pm[ci * stride, cj * stride]
                )
                assert cell_valid[ci * gw + cj] == valid[ci * stride, cj * stride]

    def test_rejects_mismatched_valid(self):
        with pytest.raises(ShapeError):
            fc.attach_coordinates(np.zeros((8, 8, 3)), np.zeros((8, 7), dtype=bool), 4)


def _random_level1(rng, gh, gw, c, invalid_frac=0.3):
    feats = rng.standard_normal((gh, gw, c)).astype(np.float32)
    coords = rng.standard_normal((gh * gw, 3))
    valid = rng.random(gh * gw) > invalid_frac
    return feats, coords, valid


class TestBuildPyramid:
    def test_level_count_and_shapes(self):
        rng = np.random.default_rng(0)
        feats, coords, valid = _random_level1(rng, 7, 9, 5)
        levels = fc.build_pyramid(nn.Tensor(feats), coords, valid, num_levels=3)
        assert [(lv.height, lv.width) for lv in levels] == fc.level_shapes(7, 9, 3)
        assert all(lv.channels == 5 for lv in levels)
        assert levels[0].num_cells == 63

    def test_coords_are_top_left_subset(self):
        rng = np.random.default_rng(1)
        feats, coords, valid = _random_level1(rng, 6, 8, 4)
        levels = fc.build_pyramid(nn.Tensor(feats), coords, valid, num_levels=2)
        lv0, lv1 = levels
        grid0 = lv0.coords.reshape(6, 8, 3)
        np.testing.assert_array_equal(lv1.coords.reshape(3, 4, 3), grid0[::2, ::2])
        np.testing.assert_array_equal(
            lv1.valid.reshape(3, 4), lv0.valid.reshape(6, 8)[::2, ::2]
        )

    def test_pooling_is_masked_average(self):
        rng = np.random.default_rng(2)
        gh, gw, c = 5, 6, 3  # odd height exercises the edge blocks
        feats, coords, valid = _random_level1(rng, gh, gw, c, invalid_frac=0.5)
        levels = fc.build_pyramid(nn.Tensor(feats), coords, valid, num_levels=2)
        flat = feats.reshape(gh * gw, c)
        vgrid = valid.reshape(gh, gw)
        h2, w2 = levels[1].height, levels[1].width
        expect = np.zeros((h2, w2, c), dtype=np.float64)
        for bi in range(h2):
            for bj in range(w2):
                acc, cnt = np.zeros(c), 0
                for di in (0, 1):
                    for dj in (0, 1):
                        i, j = 2 * bi + di, 2 * bj + dj
                        if i < gh and j < gw and vgrid[i, j]:
                            acc += flat[i * gw + j]
                            cnt += 1
                if cnt:
                    expect[bi, bj] = acc / cnt
        np.testing.assert_allclose(
            levels[1].features.data.reshape(h2, w2, c), expect, rtol=0, atol=1e-6
        )

    def test_all_invalid_block_pools_to_zero(self):
        feats = np.ones((4, 4, 2), dtype=np.float32)
        valid = np.ones(16, dtype=bool)
        valid[[0, 1, 4, 5]] = False  # the whole top-left 2x2 block
        coords = np.zeros((16, 3))
        levels = fc.build_pyramid(nn.Tensor(feats), coords, valid, num_levels=2)
        np.testing.assert_array_equal(levels[1].features.data[0], [0.0, 0.0])
        assert not levels[1].valid[0]
        np.testing.assert_array_equal(levels[1].features.data[1], [1.0, 1.0])

    def test_gradient_flows_through_pooling(self):
        rng = np.random.default_rng(3)
        feats, coords, valid = _random_level1(rng, 4, 4, 2, invalid_frac=0.0)
        root = nn.Tensor(feats, requires_grad=True)
        levels = fc.build_pyramid(root, coords, valid, num_levels=2)
        nn.reduce_sum(levels[1].features).backward()
        # every valid source cell contributes 1/4 to exactly one block sum
        np.testing.assert_allclose(root.grad, np.full_like(feats, 0.25), atol=1e-7)

    def test_rejects_flat_features(self):
        with pytest.raises(ShapeError):
            fc.build_pyramid(nn.Tensor(np.zeros((12, 4), dtype=np.float32)),
                             np.zeros((12, 3)), np.ones(12, dtype=bool), 1)
