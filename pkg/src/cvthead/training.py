"""Desk-scale end-to-end training against a deterministic reference shader.

The oracle renderer splats Lambertian-shaded per-vertex colors through the
same rasterizer the neural path uses, so the learner must fit descriptors
and rendering rather than fight a resolution mismatch. The in-scope loss is
L1 on RGB plus Dice on the soft mask; optimization is Adam over transformer
and renderer weights with the head model frozen.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from . import vertex_transformer as vt
from .camera import CameraParams
from .errors import ShapeError, TrainingError
from .head_model import AvatarParams, HeadModel, vertices_for_params
from .numerics import GradTape, Tensor, backward
from .rasterizer import splat
from .renderer import FrameResult, RendererConfig, init_renderer_weights, render

DEFAULT_LIGHT = (0.0, 0.0, 1.0)
AMBIENT, DIFFUSE = 0.3, 0.7
ORACLE_BACKGROUND = 0.0   # mid-gray in [-1,1]


# ---------------------------------------------------------------------------
# oracle renderer

def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; degenerate vertices default to +z."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    n = np.zeros_like(v)
    if len(f):
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        for k in range(3):
            np.add.at(n, f[:, k], fn)
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    out = np.where(norms > 1e-12, n / np.maximum(norms, 1e-12), [0.0, 0.0, 1.0])
    return out.astype(np.float32)


def oracle_render(
    model: HeadModel,
    params: AvatarParams,
    albedo: np.ndarray,
    width: int,
    height: int,
    light: Sequence[float] = DEFAULT_LIGHT,
) -> tuple[np.ndarray, np.ndarray]:
    """Reference shader: Lambertian vertex colors splatted with the shared
    z-buffer rasterizer. Returns (image in [-1,1], mask in {0,1})."""
    albedo = np.asarray(albedo, dtype=np.float32)
    if albedo.shape != (model.n_vertices, 3):
        raise ShapeError(f"albedo must be ({model.n_vertices},3), got {albedo.shape}")
    verts = vertices_for_params(model, params)
    normals = vertex_normals(verts, model.faces)
    l = np.asarray(light, dtype=np.float32)
    l = l / np.linalg.norm(l)
    shade = AMBIENT + DIFFUSE * np.maximum(0.0, normals @ l)
    colors = albedo * shade[:, None].astype(np.float32)

    s = splat(verts, colors, params.camera, width, height)
    feat = s.features.numpy()
    image = np.full((height, width, 3), ORACLE_BACKGROUND, dtype=np.float32)
    image[s.occupancy] = 2.0 * feat[s.occupancy] - 1.0
    mask = s.occupancy.astype(np.float32)
    return image, mask


# ---------------------------------------------------------------------------
# losses and metrics

def loss_total(
    pred: FrameResult,
    target_image: np.ndarray,
    target_mask: np.ndarray,
    lambda_l1: float = 1.0,
    lambda_seg: float = 1.0,
    dice_eps: float = 1.0,
) -> tuple[Tensor, dict]:
    """In-scope loss subset: lambda_l1 * L1(RGB) + lambda_seg * Dice(mask)."""
    target_image = np.asarray(target_image, dtype=np.float32)
    target_mask = np.asarray(target_mask, dtype=np.float32)
    if tuple(pred.rgb.shape) != target_image.shape:
        raise ShapeError(f"prediction {pred.rgb.shape} vs target {target_image.shape}")
    if tuple(pred.mask.shape) != target_mask.shape:
        raise ShapeError(f"mask {pred.mask.shape} vs target {target_mask.shape}")
    dtype = pred.rgb.dtype
    l1 = nm.mean(nm.absval(nm.sub(pred.rgb, Tensor(target_image, dtype=dtype))))

    tm = Tensor(target_mask, dtype=dtype)
    inter = nm.sum_(nm.mul(pred.mask, tm))
    sums = nm.add(nm.sum_(pred.mask), nm.sum_(tm))
    dice = nm.sub(1.0, nm.div(nm.add(nm.mul(inter, 2.0), float(dice_eps)),
                              nm.add(sums, float(dice_eps))))
    total = nm.add(nm.mul(l1, float(lambda_l1)), nm.mul(dice, float(lambda_seg)))
    components = {"l1": l1.item(), "dice": dice.item(), "total": total.item()}
    return total, components


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray, kernel: np.ndarray) -> float:
    """Gaussian-weighted SSIM over valid windows, data range 1."""
    from numpy.lib.stride_tricks import sliding_window_view

    win = kernel.shape[0]
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    mu_a = np.einsum("ijkl,kl->ij", wa, kernel)
    mu_b = np.einsum("ijkl,kl->ij", wb, kernel)
    ea2 = np.einsum("ijkl,kl->ij", wa * wa, kernel)
    eb2 = np.einsum("ijkl,kl->ij", wb * wb, kernel)
    eab = np.einsum("ijkl,kl->ij", wa * wb, kernel)
    var_a = ea2 - mu_a ** 2
    var_b = eb2 - mu_b ** 2
    cov = eab - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean())


PSNR_CAP = 100.0


def metrics(pred_image: np.ndarray, target_image: np.ndarray,
            mask: Optional[np.ndarray] = None) -> dict:
    """L1 / PSNR / SSIM between images in [-1,1] (remapped to [0,1] internally).

    L1 is restricted to the mask region when a mask is supplied.
    """
    a = (np.asarray(pred_image, dtype=np.float64) + 1.0) / 2.0
    b = (np.asarray(target_image, dtype=np.float64) + 1.0) / 2.0
    if a.shape != b.shape:
        raise ShapeError(f"metric shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    if mask is not None:
        m = np.asarray(mask) > 0.5
        l1 = float(diff[m].mean()) if m.any() else 0.0
    else:
        l1 = float(diff.mean())
    mse = float(((a - b) ** 2).mean())
    psnr = PSNR_CAP if mse < 1e-10 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
    win = min(11, a.shape[0], a.shape[1])
    if win % 2 == 0:
        win -= 1
    kernel = _gaussian_kernel(size=win)
    if a.ndim == 3:
        ssim = float(np.mean([_ssim_single(a[:, :, c], b[:, :, c], kernel)
                              for c in range(a.shape[2])]))
    else:
        ssim = _ssim_single(a, b, kernel)
    return {"l1": l1, "psnr": float(psnr), "ssim": ssim}


# ---------------------------------------------------------------------------
# toy dataset

@dataclass
class ToySample:
    source: AvatarParams
    driving: AvatarParams
    source_image: np.ndarray   # (H,W,3) in [-1,1]
    target_image: np.ndarray   # (H,W,3) in [-1,1]
    target_mask: np.ndarray    # (H,W) in {0,1}
    albedo: np.ndarray         # (N,3) in [0,1]


def make_albedo(model: HeadModel, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-vertex colors: low-frequency fields keep neighbors alike."""
    pos = model.template
    albedo = np.empty((model.n_vertices, 3), dtype=np.float32)
    for c in range(3):
        freq = rng.uniform(1.0, 2.0, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        albedo[:, c] = 0.55 + 0.22 * np.sin(pos @ freq + phase)
    return np.clip(albedo, 0.05, 0.95)


def _sample_params(model: HeadModel, rng: np.random.Generator, beta: np.ndarray,
                   pose_scale: float, expr_scale: float, camera: CameraParams) -> AvatarParams:
    phi = rng.normal(0.0, expr_scale, model.n_expr).astype(np.float32)
    theta = rng.normal(0.0, pose_scale, model.theta_len).astype(np.float32)
    return AvatarParams(beta=beta.copy(), phi=phi, theta=theta, camera=camera)


def make_toy_dataset(
    model: HeadModel,
    n_pairs: int = 8,
    size: int = 64,
    seed: int = 0,
    pose_scale: float = 0.10,
    expr_scale: float = 0.35,
    camera: Optional[CameraParams] = None,
    light: Sequence[float] = DEFAULT_LIGHT,
) -> list[ToySample]:
    """Self-reenactment pairs: source and driving share identity (beta),
    driving varies pose/expression. Bitwise stable per seed."""
    cam = camera or CameraParams(scale=1.5)
    samples = []
    for i in range(n_pairs):
        rng = np.random.default_rng((seed, i))
        beta = rng.normal(0.0, 0.5, model.n_shape).astype(np.float32)
        albedo = make_albedo(model, rng)
        source = _sample_params(model, rng, beta, pose_scale, expr_scale, cam)
        driving = _sample_params(model, rng, beta, pose_scale, expr_scale, cam)
        src_img, _ = oracle_render(model, source, albedo, size, size, light)
        tgt_img, tgt_mask = oracle_render(model, driving, albedo, size, size, light)
        samples.append(ToySample(source=source, driving=driving,
                                 source_image=src_img, target_image=tgt_img,
                                 target_mask=tgt_mask, albedo=albedo))
    return samples


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    weights: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """One Adam update; iteration over sorted names keeps it deterministic."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = {}
    for name in sorted(weights):
        w = weights[name]
        g = grads[name].astype(w.dtype)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(w.dtype)
        out[name] = Tensor._wrap(w.numpy() - update, requires_grad=True)
    return out


# ---------------------------------------------------------------------------
# training loop

def toy_transformer_config(model: HeadModel) -> vt.TransformerConfig:
    return vt.TransformerConfig(
        n_coarse=model.n_coarse, width=96, out_channels=32, n_layers=2,
        n_heads=4, cnn_channels=(16, 32, 64),
        n_mix_stages=len(model.upsample_chain))


def toy_renderer_config() -> RendererConfig:
    return RendererConfig(depth_levels=2, base_channels=24, in_channels=33)


def init_weights(model: HeadModel, seed: int,
                 t_config: Optional[vt.TransformerConfig] = None,
                 r_config: Optional[RendererConfig] = None,
                 dtype=np.float32) -> tuple[dict[str, Tensor], vt.TransformerConfig, RendererConfig]:
    tcfg = t_config or toy_transformer_config(model)
    rcfg = r_config or toy_renderer_config()
    weights = vt.init_transformer_weights(tcfg, seed, dtype=dtype)
    weights.update(init_renderer_weights(rcfg, seed + 1, dtype=dtype))
    return weights, tcfg, rcfg


def forward_sample(
    model: HeadModel,
    weights: dict[str, Tensor],
    tcfg: vt.TransformerConfig,
    rcfg: RendererConfig,
    sample: ToySample,
) -> FrameResult:
    """Neural forward for one reenactment pair at the sample's resolution."""
    h, w = sample.target_image.shape[:2]
    src_verts = vertices_for_params(model, sample.source)
    image_chw = np.ascontiguousarray(sample.source_image.transpose(2, 0, 1))
    descriptors = vt.compute_descriptors(
        model, weights, tcfg, image_chw, src_verts, sample.source.camera)
    driven = vertices_for_params(model, sample.driving)
    s = splat(driven, descriptors, sample.driving.camera, w, h)
    return render(s, weights, rcfg)


def evaluate(model: HeadModel, weights: dict[str, Tensor],
             tcfg: vt.TransformerConfig, rcfg: RendererConfig,
             dataset: Sequence[ToySample]) -> dict:
    """Training-set quality: mean PSNR and binarized Dice across samples."""
    psnrs, dices = [], []
    for sample in dataset:
        frame = forward_sample(model, weights, tcfg, rcfg, sample)
        psnrs.append(metrics(frame.rgb_array(), sample.target_image)["psnr"])
        p = frame.mask_array() > 0.5
        t = sample.target_mask > 0.5
        denom = p.sum() + t.sum()
        dices.append(1.0 if denom == 0 else 2.0 * np.logical_and(p, t).sum() / denom)
    return {"psnr": float(np.mean(psnrs)), "dice": float(np.mean(dices))}


def train_toy(
    model: HeadModel,
    dataset: Sequence[ToySample],
    steps: int,
    lr: float = 1e-4,
    seed: int = 0,
    t_config: Optional[vt.TransformerConfig] = None,
    r_config: Optional[RendererConfig] = None,
    weights: Optional[dict[str, Tensor]] = None,
    lambda_l1: float = 1.0,
    lambda_seg: float = 1.0,
    early_stop_psnr: Optional[float] = None,
    early_stop_dice: Optional[float] = None,
    eval_every: int = 100,
    log_fn=None,
) -> tuple[dict[str, Tensor], list[dict], vt.TransformerConfig, RendererConfig]:
    """Adam on transformer+renderer weights; the head model and oracle stay
    frozen. Deterministic per seed; returns (weights, loss curve, configs).

    With early-stop thresholds set, evaluation runs every `eval_every` steps
    and training ends once all requested thresholds are met.
    """
    if not dataset:
        raise TrainingError("dataset is empty", step=0)
    if weights is None:
        weights, tcfg, rcfg = init_weights(model, seed, t_config, r_config)
    else:
        tcfg = t_config or toy_transformer_config(model)
        rcfg = r_config or toy_renderer_config()

    state = AdamState()
    curve: list[dict] = []
    check_stop = early_stop_psnr is not None or early_stop_dice is not None
    t_start = time.perf_counter()

    for step in range(steps):
        sample = dataset[step % len(dataset)]
        with GradTape() as tape:
            for wt in weights.values():
                tape.watch(wt)
            frame = forward_sample(model, weights, tcfg, rcfg, sample)
            loss, comps = loss_total(frame, sample.target_image, sample.target_mask,
                                     lambda_l1=lambda_l1, lambda_seg=lambda_seg)
            if not np.isfinite(comps["total"]):
                raise TrainingError(f"loss diverged at step {step}", step=step)
            grad_map = backward(loss, tape=tape)
            grads = {name: grad_map[wt.node_id].numpy() for name, wt in weights.items()}
        weights = adam_step(weights, grads, state, lr)
        curve.append({"step": step, "total": comps["total"],
                      "l1": comps["l1"], "dice": comps["dice"]})
        if log_fn is not None and (step % eval_every == 0 or step == steps - 1):
            log_fn(step, comps, time.perf_counter() - t_start)
        if check_stop and step > 0 and (step + 1) % eval_every == 0:
            quality = evaluate(model, weights, tcfg, rcfg, dataset)
            if ((early_stop_psnr is None or quality["psnr"] >= early_stop_psnr)
                    and (early_stop_dice is None or quality["dice"] >= early_stop_dice)):
                break
    return weights, curve, tcfg, rcfg


def save_curve_csv(curve: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "total", "l1", "dice"])
        for row in curve:
            writer.writerow([row["step"], row["total"], row["l1"], row["dice"]])
