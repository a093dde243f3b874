import numpy as np
import pytest

import cvthead.numerics as nm
from cvthead.camera import CameraParams
from cvthead.errors import ShapeError
from cvthead.rasterizer import SplatImage, splat
from cvthead.renderer import (
    FrameResult,
    RendererConfig,
    frame_to_rgb8,
    init_renderer_weights,
    render,
)


def make_splat(h, w, c, seed=0):
    rng = np.random.default_rng(seed)
    n = 40
    verts = rng.uniform(-0.9, 0.9, size=(n, 3)).astype(np.float32)
    desc = rng.normal(size=(n, c)).astype(np.float32)
    return splat(verts, desc, CameraParams(), w, h)


class TestArchitectureContract:
    def test_output_dims_preserved(self):
        cfg = RendererConfig(depth_levels=2, base_channels=8, in_channels=5)
        w = init_renderer_weights(cfg, seed=0)
        s = make_splat(64, 64, 4)
        frame = render(s, w, cfg)
        assert frame.rgb.shape == (64, 64, 3)
        assert frame.mask.shape == (64, 64)
        assert "render_ms" in frame.timing

    def test_full_channel_contract(self):
        # 32 feature channels + depth -> RGB + mask at unchanged resolution
        cfg = RendererConfig(depth_levels=3, base_channels=8, in_channels=33)
        w = init_renderer_weights(cfg, seed=1)
        s = make_splat(64, 64, 32)
        frame = render(s, w, cfg)
        assert frame.rgb.shape == (64, 64, 3)
        assert frame.mask.shape == (64, 64)

    def test_indivisible_dims_rejected(self):
        cfg = RendererConfig(depth_levels=3, base_channels=8, in_channels=5)
        w = init_renderer_weights(cfg, seed=0)
        s = make_splat(60, 64, 4)
        with pytest.raises(ShapeError):
            render(s, w, cfg)

    def test_channel_mismatch_rejected(self):
        cfg = RendererConfig(depth_levels=2, base_channels=8, in_channels=9)
        w = init_renderer_weights(cfg, seed=0)
        s = make_splat(32, 32, 4)
        with pytest.raises(ShapeError):
            render(s, w, cfg)


class TestOutputRanges:
    def test_zero_weights_give_bias_only_output(self):
        cfg = RendererConfig(depth_levels=2, base_channels=8, in_channels=5)
        w = init_renderer_weights(cfg, seed=0)
        zeroed = {k: nm.Tensor(np.zeros_like(t.numpy())) for k, t in w.items()}
        s = make_splat(32, 32, 4, seed=3)
        frame = render(s, zeroed, cfg)
        np.testing.assert_array_equal(frame.rgb_array(), 0.0)   # tanh(0)
        np.testing.assert_array_equal(frame.mask_array(), 0.5)  # sigmoid(0)

    def test_ranges_enforced_for_wild_inputs(self):
        cfg = RendererConfig(depth_levels=2, base_channels=8, in_channels=5)
        rng = np.random.default_rng(4)
        w = {k: nm.Tensor((t.numpy() * 20).astype(np.float32))
             for k, t in init_renderer_weights(cfg, seed=2).items()}
        s = make_splat(32, 32, 4, seed=5)
        big = SplatImage(
            features=nm.Tensor((s.features.numpy() * 100).astype(np.float32)),
            depth=s.depth, occupancy=s.occupancy, winner=s.winner)
        frame = render(big, w, cfg)
        assert frame.rgb_array().min() >= -1.0 and frame.rgb_array().max() <= 1.0
        assert frame.mask_array().min() >= 0.0 and frame.mask_array().max() <= 1.0


class TestTranslationCovariance:
    def test_interior_shift_equivariance(self):
        cfg = RendererConfig(depth_levels=3, base_channels=8, in_channels=5)
        w = init_renderer_weights(cfg, seed=6)
        rng = np.random.default_rng(7)
        size, shift, margin = 128, 8, 44
        feat = np.zeros((size, size, 4), dtype=np.float32)
        depth = np.zeros((size, size), dtype=np.float32)
        inner = slice(margin, size - margin)
        feat[inner, inner] = rng.normal(size=(size - 2 * margin, size - 2 * margin, 4))
        depth[inner, inner] = rng.uniform(0, 1, size=(size - 2 * margin, size - 2 * margin))

        def run(f, d):
            s = SplatImage(features=nm.Tensor(f), depth=d,
                           occupancy=d > 0, winner=np.full((size, size), -1, np.int32))
            return render(s, w, cfg).rgb_array()

        base = run(feat, depth)
        shifted = run(np.roll(feat, (shift, shift), axis=(0, 1)),
                      np.roll(depth, (shift, shift), axis=(0, 1)))
        region = slice(margin + shift, size - margin)
        np.testing.assert_allclose(
            shifted[region, region],
            base[margin:size - margin - shift, margin:size - margin - shift],
            atol=1e-4)


class TestRendererGradients:
    def test_grad_through_render_and_l1(self):
        cfg = RendererConfig(depth_levels=1, base_channels=4, in_channels=3)
        w64 = init_renderer_weights(cfg, seed=8, dtype=np.float64)
        rng = np.random.default_rng(9)
        target = rng.uniform(-1, 1, size=(16, 16, 3))
        depth = rng.uniform(0, 1, size=(16, 16)).astype(np.float32)

        def run(feat, stem_w):
            ws = dict(w64)
            ws["unet.stem.w"] = stem_w
            s = SplatImage(features=feat, depth=depth,
                           occupancy=depth > 0, winner=np.full((16, 16), -1, np.int32))
            frame = render(s, ws, cfg)
            return nm.mean(nm.absval(nm.sub(frame.rgb, nm.Tensor(target, dtype=np.float64))))

        feat0 = nm.Tensor(rng.normal(size=(16, 16, 2)), dtype=np.float64)
        rep = nm.grad_check(run, [feat0, w64["unet.stem.w"]], rel_tol=1e-3)
        assert rep.passed, rep


def test_frame_to_rgb8_composite():
    rgb = nm.Tensor(np.full((4, 4, 3), -1.0, dtype=np.float32))
    mask = nm.Tensor(np.full((4, 4), 1.0, dtype=np.float32))
    frame = FrameResult(rgb=rgb, mask=mask)
    img = frame_to_rgb8(frame)
    assert img.shape == (4, 4, 3) and img.dtype == np.uint8
    np.testing.assert_array_equal(img, 0)
    with_alpha = frame_to_rgb8(frame, alpha=True)
    assert with_alpha.shape == (4, 4, 4)
    np.testing.assert_array_equal(with_alpha[:, :, 3], 255)
