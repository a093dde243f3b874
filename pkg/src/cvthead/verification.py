"""End-to-end gradient verification: composite checks beyond single ops.

Everything here runs in float64 on miniature configurations so central
differences are trustworthy at rel_tol 1e-3.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import numerics as nm
from . import vertex_transformer as vt
from .camera import CameraParams
from .head_model import generate_synthetic_model, neutral_params, vertices_for_params
from .numerics import Tensor
from .numerics.gradcheck import GradCheckReport, grad_check
from .rasterizer import splat
from .renderer import RendererConfig, init_renderer_weights, render
from .training import loss_total, make_albedo, oracle_render


@lru_cache(maxsize=1)
def _tiny_setup():
    model = generate_synthetic_model(seed=11, n_vertices=60, n_coarse=8,
                                     shape_dims=2, expr_dims=2)
    tcfg = vt.TransformerConfig(n_coarse=8, width=8, out_channels=4, n_layers=1,
                                n_heads=2, cnn_channels=(4, 4, 4), n_mix_stages=2)
    rcfg = RendererConfig(depth_levels=1, base_channels=4, in_channels=5)
    return model, tcfg, rcfg


def _splat_check(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-0.8, 0.8, size=(15, 3)).astype(np.float32)
    probe = rng.normal(size=(8, 8, 4))
    cam = CameraParams()

    def run(desc):
        s = splat(verts, desc, cam, 8, 8)
        return nm.sum_(nm.mul(s.features, Tensor(probe, dtype=desc.dtype)))

    return grad_check(run, [Tensor(rng.normal(size=(15, 4)), dtype=np.float64)])


def _attention_check(seed: int) -> GradCheckReport:
    _, tcfg, _ = _tiny_setup()
    w = vt.init_transformer_weights(tcfg, seed=seed + 100, dtype=np.float64)
    rng = np.random.default_rng(seed)
    img_tokens = Tensor(rng.normal(size=(4, tcfg.width)), dtype=np.float64)
    verts = rng.uniform(-0.5, 0.5, size=(tcfg.n_coarse, 3)).astype(np.float32)

    def run(xv, qw):
        ws = dict(w)
        ws["vertex_tokens"] = xv
        ws["enc.layer0.q.w"] = qw
        seq = vt.build_tokens(ws, verts, CameraParams(), img_tokens, (2, 2), tcfg)
        out = vt.transformer_forward(seq, ws, tcfg)
        return nm.sum_(nm.mul(out, out))

    return grad_check(run, [w["vertex_tokens"], w["enc.layer0.q.w"]])


def _renderer_check(seed: int) -> GradCheckReport:
    _, _, rcfg = _tiny_setup()
    w = init_renderer_weights(rcfg, seed=seed + 200, dtype=np.float64)
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0, 1, size=(8, 8)).astype(np.float32)
    target = rng.uniform(-1, 1, size=(8, 8, 3)).astype(np.float32)
    tmask = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float32)

    def run(feat, skip_w):
        ws = dict(w)
        ws["unet.skip.w"] = skip_w
        from .rasterizer import SplatImage
        s = SplatImage(features=feat, depth=depth, occupancy=depth > 0,
                       winner=np.full((8, 8), -1, np.int32))
        frame = render(s, ws, rcfg)
        total, _ = loss_total(frame, target, tmask)
        return total

    feat0 = Tensor(rng.normal(size=(8, 8, 4)), dtype=np.float64)
    return grad_check(run, [feat0, w["unet.skip.w"]])


def _pipeline_check(seed: int) -> GradCheckReport:
    """Head model -> transformer -> splat -> renderer -> L1+Dice, end to end."""
    model, tcfg, rcfg = _tiny_setup()
    w = vt.init_transformer_weights(tcfg, seed=seed + 300, dtype=np.float64)
    w.update(init_renderer_weights(rcfg, seed=seed + 301, dtype=np.float64))
    rng = np.random.default_rng(seed)

    albedo = make_albedo(model, rng)
    source = neutral_params(model, CameraParams(1.3))
    driving = neutral_params(model, CameraParams(1.3))
    driving.theta = rng.normal(0, 0.1, model.theta_len).astype(np.float32)
    src_img, _ = oracle_render(model, source, albedo, 32, 32)
    tgt_img, tgt_mask = oracle_render(model, driving, albedo, 16, 16)

    src_verts = vertices_for_params(model, source)
    drv_verts = vertices_for_params(model, driving)
    image = Tensor(np.ascontiguousarray(src_img.transpose(2, 0, 1)), dtype=np.float64)

    def run(xv, head_w, skip_w, mix_w):
        ws = dict(w)
        ws["vertex_tokens"] = xv
        ws["head.w"] = head_w
        ws["unet.skip.w"] = skip_w
        ws["mix0.w"] = mix_w
        desc = vt.compute_descriptors(model, ws, tcfg, image, src_verts, source.camera)
        s = splat(drv_verts, desc, driving.camera, 16, 16)
        frame = render(s, ws, rcfg)
        total, _ = loss_total(frame, tgt_img, tgt_mask)
        return total

    return grad_check(run, [w["vertex_tokens"], w["head.w"], w["unet.skip.w"], w["mix0.w"]])


def pipeline_checks():
    """Composite named checks for the verification CLI and acceptance suite."""
    return {
        "splat": _splat_check,
        "attention_block": _attention_check,
        "renderer_l1": _renderer_check,
        "pipeline_e2e": _pipeline_check,
    }
