import numpy as np
import pytest

from textrich import tensor as T
from textrich.encoder import (FULL_ENCODER, EncoderConfig, PatchMerging, StageFeatures, VisionEncoder,
                              effective_window, patch_embed, patch_merge, shift_mask, standardize_images,
                              window_attention, window_order)
from textrich.errors import ConfigError, DimensionError
from textrich.nn import Linear, MultiHeadAttention
from textrich.tensor import Tensor

from oracles import gathered_window_oracle, np_attention


@pytest.fixture
def attn(rng):
    return MultiHeadAttention(8, 2, rng, np.float64)


def features(rng, grid, c=8, b=2):
    return StageFeatures(grid, grid, c, Tensor(rng.normal(size=(b, grid * grid, c))))


class TestConfig:
    def test_desk_grids(self):
        cfg = EncoderConfig()
        assert [cfg.grid(s) for s in range(1, 5)] == [16, 8, 4, 2]

    def test_full_grids(self):
        assert [FULL_ENCODER.grid(s) for s in range(1, 5)] == [400, 200, 100, 50]
        FULL_ENCODER.validate()

    def test_rejects_indivisible_size(self):
        with pytest.raises(ConfigError):
            EncoderConfig(input_size=60).validate()

    def test_rejects_window_not_dividing_grid(self):
        with pytest.raises(ConfigError):
            EncoderConfig(input_size=96, window_size=5).validate()

    def test_rejects_non_doubling_widths(self):
        with pytest.raises(ConfigError):
            EncoderConfig(stage_dims=[16, 32, 48, 96]).validate()

    def test_effective_window_clamps_to_grid(self):
        assert effective_window(2, 4) == 2
        assert effective_window(16, 4) == 4


class TestPatchEmbed:
    def test_desk_grid(self, rng):
        cfg = EncoderConfig()
        proj = Linear(48, 16, rng, np.float64)
        f = patch_embed(Tensor(rng.normal(size=(64, 64, 3))), cfg, proj)
        assert (f.grid_h, f.grid_w, f.channels) == (16, 16, 16)
        assert f.data.shape == (1, 256, 16)

    def test_zero_image_gives_bias_only(self, rng):
        cfg = EncoderConfig()
        proj = Linear(48, 16, rng, np.float64)
        proj.bias.data[:] = rng.normal(size=16)
        f = patch_embed(Tensor(np.zeros((64, 64, 3))), cfg, proj)
        np.testing.assert_allclose(f.data.data[0], np.broadcast_to(proj.bias.data, (256, 16)))

    def test_patch_order_is_row_major(self, rng):
        cfg = EncoderConfig()
        proj = Linear(48, 16, rng, np.float64)
        img = rng.normal(size=(64, 64, 3))
        f = patch_embed(Tensor(img), cfg, proj)
        # token 17 is patch row 1, column 1
        patch = img[4:8, 4:8].reshape(-1)
        np.testing.assert_allclose(f.data.data[0, 17], patch @ proj.weight.data + proj.bias.data)

    def test_wrong_size(self, rng):
        proj = Linear(48, 16, rng, np.float64)
        with pytest.raises(DimensionError):
            patch_embed(Tensor(np.zeros((32, 64, 3))), EncoderConfig(), proj)

    def test_standardize(self):
        x = standardize_images(np.array([[[0, 255, 128]]], dtype=np.uint8)).data
        np.testing.assert_allclose(x[0, 0], [-1.0, 1.0, 128 / 127.5 - 1.0])


class TestWindowAttention:
    def test_window_order_is_permutation(self):
        idx, inv = window_order(8, 4, 2)
        assert sorted(idx) == list(range(64))
        np.testing.assert_array_equal(idx[inv], np.arange(64))

    def test_single_window_equals_dense(self, rng, attn):
        x = features(rng, 4)
        y = window_attention(x, 4, 0, attn).data.data
        for s in range(2):
            np.testing.assert_allclose(y[s], np_attention(attn, x.data.data[s]), atol=1e-10)

    def test_shift_zero_equals_per_window_dense(self, rng, attn):
        x = features(rng, 8)
        y = window_attention(x, 4, 0, attn).data.data
        np.testing.assert_allclose(y, gathered_window_oracle(x.data.data, 8, 4, 0, attn), atol=1e-10)

    @pytest.mark.parametrize("grid,window", [(8, 4), (8, 2), (12, 4), (6, 2)])
    def test_shifted_equals_gather_oracle(self, rng, attn, grid, window):
        x = features(rng, grid)
        y = window_attention(x, window, window // 2, attn).data.data
        oracle = gathered_window_oracle(x.data.data, grid, window, window // 2, attn)
        assert np.max(np.abs(y - oracle)) < 1e-5

    def test_masked_pairs_get_negligible_weight(self, rng, attn):
        x = features(rng, 8)
        window_attention(x, 4, 2, attn)
        w = attn.last_weights  # [B, n_windows, H, w*w, w*w]
        blocked = shift_mask(8, 4, 2)[None, :, None] < 0
        assert blocked.any()
        assert np.max(np.where(np.broadcast_to(blocked, w.shape), w, 0.0)) < 1e-8

    def test_unshifted_mask_is_all_zero(self):
        assert not shift_mask(8, 4, 0).any()

    def test_bad_shift(self, rng, attn):
        with pytest.raises(DimensionError):
            window_attention(features(rng, 8), 4, 1, attn)

    def test_bad_window(self, rng, attn):
        with pytest.raises(DimensionError):
            window_attention(features(rng, 8), 3, 0, attn)

    def test_gradcheck(self, rng):
        attn = MultiHeadAttention(4, 2, rng, np.float64)
        x = Tensor(rng.normal(size=(1, 16, 4)))

        def f(a):
            y = window_attention(StageFeatures(4, 4, 4, a), 2, 1, attn).data
            return T.tsum(y * y)

        assert T.grad_check(f, [x]) < 1e-5


class TestPatchMerge:
    def test_shapes(self, rng):
        m = PatchMerging(16, rng, np.float64)
        y = patch_merge(features(rng, 16, c=16, b=1), m)
        assert (y.grid_h, y.channels) == (8, 32)
        assert y.data.shape == (1, 64, 32)

    def test_constant_input_constant_output(self, rng):
        m = PatchMerging(4, rng, np.float64)
        m.reduction.weight.data[:] = np.eye(16, 8)
        x = StageFeatures(4, 4, 4, Tensor(np.tile(rng.normal(size=4), (1, 16, 1))))
        y = patch_merge(x, m).data.data
        np.testing.assert_allclose(y, np.broadcast_to(y[:, :1], y.shape), atol=1e-12)

    def test_neighbourhood_grouping(self, rng):
        m = PatchMerging(1, rng, np.float64)
        m.norm.gamma.data[:] = 1.0
        m.reduction.weight.data[:] = np.array([[1.0, 0], [0, 1], [0, 0], [0, 0]])
        vals = np.arange(16, dtype=np.float64)
        x = StageFeatures(4, 4, 1, Tensor(vals.reshape(1, 16, 1)))
        y = patch_merge(x, m).data.data[0]
        # 2x2 block (0, 1, 4, 5) layer-normed: the first two entries become -a, -b of the same pattern
        block = np.array([0.0, 1, 4, 5])
        z = (block - block.mean()) / np.sqrt(block.var() + 1e-5)
        np.testing.assert_allclose(y[0], z[:2], atol=1e-9)

    def test_odd_grid(self, rng):
        with pytest.raises(DimensionError):
            patch_merge(features(rng, 3, c=4, b=1), PatchMerging(4, rng, np.float64))

    def test_gradcheck(self, rng):
        m = PatchMerging(3, rng, np.float64)
        x = Tensor(rng.normal(size=(1, 16, 3)))

        def f(a):
            y = patch_merge(StageFeatures(4, 4, 3, a), m).data
            return T.tsum(y * y)

        assert T.grad_check(f, [x]) < 1e-5


def toy_encoder_config() -> EncoderConfig:
    return EncoderConfig(input_size=16, patch_size=2, window_size=2, stage_depths=[1, 2, 1, 1],
                         stage_dims=[4, 8, 16, 32], stage_heads=[1, 2, 2, 4], mlp_ratio=2)


class TestEncoder:
    def test_desk_output_shapes(self, rng):
        enc = VisionEncoder(EncoderConfig(), rng, np.float64)
        s3, s4 = enc.encode(standardize_images(rng.integers(0, 256, (2, 64, 64, 3))))
        assert (s3.grid_h, s3.channels, s3.data.shape) == (4, 64, (2, 16, 64))
        assert (s4.grid_h, s4.channels, s4.data.shape) == (2, 128, (2, 4, 128))

    def test_smaller_input(self, rng):
        enc = VisionEncoder(EncoderConfig(), rng, np.float64)
        s3, s4 = enc.encode(standardize_images(rng.integers(0, 256, (1, 32, 32, 3))))
        assert (s3.grid_h, s4.grid_h) == (2, 1)

    def test_too_large_input(self, rng):
        enc = VisionEncoder(EncoderConfig(input_size=32), rng, np.float64)
        with pytest.raises(DimensionError):
            enc.encode(standardize_images(np.zeros((1, 64, 64, 3))))

    def test_batch_permutation(self, rng):
        enc = VisionEncoder(EncoderConfig(), rng, np.float64)
        imgs = rng.integers(0, 256, (3, 64, 64, 3))
        imgs[2] = imgs[0]
        a = enc.encode(standardize_images(imgs))[1].data.data
        b = enc.encode(standardize_images(imgs[[2, 1, 0]]))[1].data.data
        np.testing.assert_allclose(a, b[[2, 1, 0]], atol=1e-12)
        np.testing.assert_allclose(a[0], a[2], atol=1e-12)

    def test_end_to_end_gradcheck(self, rng):
        enc = VisionEncoder(toy_encoder_config(), rng, np.float64)
        img = Tensor(rng.normal(size=(1, 16, 16, 3)))

        def f(x):
            s3, s4 = enc.encode(x)
            return T.tsum(s3.data * s3.data) + T.tsum(s4.data)

        assert T.grad_check(f, [img], max_checks=40) < 1e-4
        params = enc.parameters()
        assert T.grad_check(lambda *p: f(img), params[:6], max_checks=10) < 1e-4
