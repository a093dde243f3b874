"""Frame orchestration shared by the CLI and the render service.

An AvatarSession owns a head model, a weight bundle, and a fixed source
identity (oracle-rendered from neutral params with a seeded albedo).
Descriptors are computed once from that source and cached; each frame then
only needs reconstruct -> splat -> render, which is what makes interactive
steering responsive.
"""
from __future__ import annotations

import io
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from . import numerics as nm
from . import vertex_transformer as vt
from .camera import CameraParams, project, to_pixel_array
from .errors import FormatError, ShapeError
from .head_model import (
    AvatarParams,
    HeadModel,
    neutral_params,
    validate_params,
    vertices_for_params,
)
from .numerics import Tensor, load_container, save_container
from .rasterizer import depth_view, splat, splat_view
from .renderer import RendererConfig, frame_to_rgb8, render
from .training import init_weights, make_albedo, oracle_render

RENDER_MODES = ("depth", "splat", "neural", "oracle")
DEFAULT_CAMERA_SCALE = 1.5
DEFAULT_SOURCE_SIZE = 64


class RenderError(RuntimeError):
    """A pipeline stage failed; carries the stage name for error reporting."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage

TRANSFORMER_CONFIG_ENTRY = "config.transformer"
RENDERER_CONFIG_ENTRY = "config.renderer"


@dataclass
class WeightBundle:
    weights: dict[str, Tensor]
    transformer_config: vt.TransformerConfig
    renderer_config: RendererConfig


def default_bundle(model: HeadModel, seed: int = 0) -> WeightBundle:
    """Seeded random init; geometry views work without any training."""
    weights, tcfg, rcfg = init_weights(model, seed)
    return WeightBundle(weights=weights, transformer_config=tcfg, renderer_config=rcfg)


def save_bundle(path, bundle: WeightBundle) -> None:
    entries = {name: t.numpy() for name, t in sorted(bundle.weights.items())}
    entries[TRANSFORMER_CONFIG_ENTRY] = bundle.transformer_config.to_array()
    entries[RENDERER_CONFIG_ENTRY] = bundle.renderer_config.to_array()
    save_container(path, entries)


def load_bundle(path) -> WeightBundle:
    entries = load_container(path)
    try:
        tcfg = vt.TransformerConfig.from_array(entries.pop(TRANSFORMER_CONFIG_ENTRY))
        rcfg = RendererConfig.from_array(entries.pop(RENDERER_CONFIG_ENTRY))
    except KeyError as e:
        raise FormatError(f"weight bundle missing {e.args[0]!r}") from e
    weights = {name: Tensor(arr, requires_grad=True) for name, arr in entries.items()}
    return WeightBundle(weights=weights, transformer_config=tcfg, renderer_config=rcfg)


def default_camera() -> CameraParams:
    return CameraParams(scale=DEFAULT_CAMERA_SCALE)


class AvatarSession:
    """Model + weights + fixed source identity, ready to render frames."""

    def __init__(
        self,
        model: HeadModel,
        bundle: Optional[WeightBundle] = None,
        albedo_seed: int = 0,
        source_size: int = DEFAULT_SOURCE_SIZE,
    ):
        self.model = model
        self.bundle = bundle or default_bundle(model)
        self.albedo = make_albedo(model, np.random.default_rng(albedo_seed))
        self.source_params = neutral_params(model, default_camera())
        self.source_image, _ = oracle_render(
            model, self.source_params, self.albedo, source_size, source_size)
        self._descriptors: Optional[np.ndarray] = None

    @property
    def descriptors(self) -> np.ndarray:
        """(N,C) source descriptors, computed once per session."""
        if self._descriptors is None:
            self._descriptors = self.compute_descriptors()
        return self._descriptors

    def compute_descriptors(self) -> np.ndarray:
        src_verts = vertices_for_params(self.model, self.source_params)
        image_chw = np.ascontiguousarray(self.source_image.transpose(2, 0, 1))
        desc = vt.compute_descriptors(
            self.model, self.bundle.weights, self.bundle.transformer_config,
            image_chw, src_verts, self.source_params.camera)
        return desc.numpy()

    def render_frame(self, params: AvatarParams, mode: str, width: int, height: int):
        """Render one frame; returns (uint8 image array, stage timings in ms).

        Failures surface as RenderError tagged with the stage name.
        """
        if mode not in RENDER_MODES:
            raise ShapeError(f"unknown render mode {mode!r}; expected one of {RENDER_MODES}")
        validate_params(self.model, params)
        timing: dict[str, float] = {}

        def stage(name, fn):
            t0 = time.perf_counter()
            try:
                out = fn()
            except Exception as e:
                raise RenderError(name, e) from e
            timing[f"{name}_ms"] = (time.perf_counter() - t0) * 1000
            return out

        if mode == "oracle":
            img, _ = stage("oracle", lambda: oracle_render(
                self.model, params, self.albedo, width, height))
            return (np.clip((img + 1) / 2 * 255, 0, 255).astype(np.uint8), timing)

        verts = stage("reconstruct", lambda: vertices_for_params(self.model, params))
        s = stage("splat", lambda: splat(verts, self.descriptors, params.camera, width, height))

        if mode == "depth":
            return depth_view(s), timing
        if mode == "splat":
            return splat_view(s), timing

        frame = stage("render", lambda: render(s, self.bundle.weights, self.bundle.renderer_config))
        return frame_to_rgb8(frame), timing


def png_bytes(image: np.ndarray) -> bytes:
    """Lossless PNG encoding; byte-stable for identical pixel data."""
    mode = "L" if image.ndim == 2 else ("RGBA" if image.shape[2] == 4 else "RGB")
    buf = io.BytesIO()
    Image.fromarray(image, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def model_info(model: HeadModel, frame_size: int) -> dict:
    return {
        "n_vertices": model.n_vertices,
        "n_coarse": model.n_coarse,
        "shape_dims": model.n_shape,
        "expr_dims": model.n_expr,
        "joints": model.n_joints,
        "frame_size": frame_size,
    }


def presets(model: HeadModel) -> dict[str, dict]:
    """Named parameter presets sized to the model's dimensions."""
    def base():
        return neutral_params(model, default_camera())

    out = {"neutral": base()}

    p = base()
    if model.n_expr > 0:
        p.phi[0] = 1.5
    out["expressive"] = p

    p = base()
    p.theta[6] = 0.35            # jaw joint, x axis
    out["jaw_open"] = p

    p = base()
    p.theta[1] = 0.8             # global yaw
    out["turn_left"] = p

    p = base()
    p.theta[1] = -0.8
    out["turn_right"] = p

    p = base()
    p.theta[0] = 0.4             # global pitch
    out["tilt_down"] = p

    p = base()
    p.camera = CameraParams(scale=2.0)
    out["close_up"] = p

    return {name: params.to_json() for name, params in out.items()}


def parse_params(model: HeadModel, obj: dict) -> AvatarParams:
    """JSON object -> validated AvatarParams; errors name the offending field."""
    if not isinstance(obj, dict):
        raise ShapeError("params must be a JSON object")
    for key, dims in (("beta", model.n_shape), ("phi", model.n_expr),
                      ("theta", model.theta_len)):
        val = obj.get(key)
        if val is None:
            raise ShapeError(f"missing field {key!r}")
        if not isinstance(val, (list, tuple)) or not all(
                isinstance(x, (int, float)) for x in val):
            raise ShapeError(f"field {key!r} must be a list of numbers")
        if len(val) != dims:
            raise ShapeError(f"field {key!r} must have length {dims}, got {len(val)}")
    cam = obj.get("camera")
    if cam is not None and not isinstance(cam, dict):
        raise ShapeError("field 'camera' must be an object")
    if cam is not None and not float(cam.get("scale", 1.0)) > 0:
        raise ShapeError("field 'camera.scale' must be positive")
    offsets = obj.get("offsets")
    if offsets is not None:
        if (not isinstance(offsets, list) or len(offsets) != model.n_vertices
                or any(len(row) != 3 for row in offsets)):
            raise ShapeError(f"field 'offsets' must be {model.n_vertices}x3 or null")
    params = AvatarParams.from_json(obj)
    validate_params(model, params)
    return params


# ---------------------------------------------------------------------------
# benchmark

BENCH_STAGES = ("reconstruct_ms", "project_ms", "transformer_ms", "splat_ms", "render_ms")


def run_bench(model: HeadModel, bundle: WeightBundle, size: int = 256,
              iters: int = 20, seed: int = 0) -> dict:
    """Per-stage median/p95 timings plus end-to-end FPS over `iters` runs."""
    session = AvatarSession(model, bundle)
    rng = np.random.default_rng(seed)
    params = neutral_params(model, default_camera())
    params.phi = rng.normal(0, 0.3, model.n_expr).astype(np.float32)
    desc = session.descriptors

    stages: dict[str, list[float]] = {k: [] for k in BENCH_STAGES}
    totals = []
    for _ in range(iters):
        t_start = time.perf_counter()

        t0 = time.perf_counter()
        verts = vertices_for_params(model, params)
        stages["reconstruct_ms"].append((time.perf_counter() - t0) * 1000)

        t0 = time.perf_counter()
        u, v, d = project(verts, params.camera)
        to_pixel_array(u, v, size, size)
        stages["project_ms"].append((time.perf_counter() - t0) * 1000)

        t0 = time.perf_counter()
        session.compute_descriptors()
        stages["transformer_ms"].append((time.perf_counter() - t0) * 1000)

        t0 = time.perf_counter()
        s = splat(verts, desc, params.camera, size, size)
        stages["splat_ms"].append((time.perf_counter() - t0) * 1000)

        t0 = time.perf_counter()
        render(s, bundle.weights, bundle.renderer_config)
        stages["render_ms"].append((time.perf_counter() - t0) * 1000)

        totals.append(time.perf_counter() - t_start)

    report = {
        name: {"median": float(np.median(vals)), "p95": float(np.percentile(vals, 95))}
        for name, vals in stages.items()
    }
    report["end_to_end_fps"] = float(1.0 / np.median(totals))
    report["iters"] = iters
    report["frame_size"] = size
    return report
