"""U-Net neural renderer: feature+depth planes to RGB and a foreground mask.

Encoder halves resolution depth_levels times (4x4 stride-2 convs), the
decoder mirrors with nearest-neighbor upsampling and skip concatenations,
so spatial dims are preserved end to end. The RGB head goes through tanh,
the mask head through sigmoid; convolutions use zero padding.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import numerics as nm
from .errors import ShapeError
from .numerics import Tensor
from .rasterizer import SplatImage

Weights = dict[str, Tensor]


@dataclass(frozen=True)
class RendererConfig:
    depth_levels: int = 3
    base_channels: int = 16
    in_channels: int = 33      # splat feature channels + 1 depth plane
    out_channels: int = 4      # RGB + mask logit

    def to_array(self) -> np.ndarray:
        return np.array([self.depth_levels, self.base_channels,
                         self.in_channels, self.out_channels], dtype=np.float32)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "RendererConfig":
        return cls(depth_levels=int(a[0]), base_channels=int(a[1]),
                   in_channels=int(a[2]), out_channels=int(a[3]))


@dataclass
class FrameResult:
    rgb: Tensor               # (H,W,3) in [-1,1]
    mask: Tensor              # (H,W) in [0,1]
    timing: dict = field(default_factory=dict)

    def rgb_array(self) -> np.ndarray:
        return self.rgb.numpy()

    def mask_array(self) -> np.ndarray:
        return self.mask.numpy()


def init_renderer_weights(config: RendererConfig, seed: int, dtype=np.float32) -> Weights:
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, k):
        std = math.sqrt(2.0 / (cin * k * k))
        w[f"unet.{name}.w"] = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)
        w[f"unet.{name}.b"] = np.zeros(cout, dtype=dtype)

    ch = config.base_channels
    conv("stem", config.in_channels, ch, 3)
    for i in range(config.depth_levels):
        conv(f"down{i}", ch, ch * 2, 4)
        conv(f"refine{i}", ch * 2, ch * 2, 3)
        ch *= 2
    for i in reversed(range(config.depth_levels)):
        conv(f"up{i}", ch, ch // 2, 3)
        conv(f"fuse{i}", ch, ch // 2, 3)   # after skip concat
        ch //= 2
    conv("out", ch, config.out_channels, 3)
    # global 1x1 input->output path: the near-pointwise part of the mapping
    # (descriptor -> color) trains without traversing the U through it
    conv("skip", config.in_channels, config.out_channels, 1)
    return {k: Tensor(v, dtype=dtype, requires_grad=True) for k, v in w.items()}


def _conv(x, weights, name, stride=1, padding=1):
    return nm.conv2d(x, weights[f"unet.{name}.w"], weights[f"unet.{name}.b"],
                     stride=stride, padding=padding)


def unet_forward(x: Tensor, weights: Weights, config: RendererConfig) -> Tensor:
    """(Cin,H,W) -> (out_channels,H,W) raw logits."""
    x = nm.gelu(_conv(x, weights, "stem"))
    skips = []
    for i in range(config.depth_levels):
        skips.append(x)
        x = nm.gelu(_conv(x, weights, f"down{i}", stride=2, padding=1))
        x = nm.gelu(_conv(x, weights, f"refine{i}"))
    for i in reversed(range(config.depth_levels)):
        x = nm.upsample2x(x)
        x = nm.gelu(_conv(x, weights, f"up{i}"))
        x = nm.concat([x, skips[i]], axis=0)
        x = nm.gelu(_conv(x, weights, f"fuse{i}"))
    return _conv(x, weights, "out")


def _unet_with_skip(x: Tensor, weights: Weights, config: RendererConfig) -> Tensor:
    return nm.add(unet_forward(x, weights, config),
                  _conv(x, weights, "skip", padding=0))


def render(splat: SplatImage, weights: Weights, config: RendererConfig) -> FrameResult:
    """Neural render of a splat image; dims must divide 2^depth_levels."""
    h, w = splat.height, splat.width
    step = 1 << config.depth_levels
    if h % step or w % step:
        raise ShapeError(f"render input {h}x{w} not divisible by 2^{config.depth_levels}")
    if splat.channels + 1 != config.in_channels:
        raise ShapeError(
            f"splat has {splat.channels}+1 input channels, config expects {config.in_channels}")

    t0 = time.perf_counter()
    dtype = splat.features.dtype
    feat = nm.transpose(splat.features, (2, 0, 1))
    depth = Tensor(splat.depth[None].astype(dtype), dtype=dtype)
    x = nm.concat([feat, depth], axis=0)
    out = _unet_with_skip(x, weights, config)
    rgb = nm.transpose(nm.tanh(nm.narrow(out, 0, 0, 3)), (1, 2, 0))
    mask = nm.reshape(nm.sigmoid(nm.narrow(out, 0, 3, 1)), (h, w))
    ms = (time.perf_counter() - t0) * 1000.0
    return FrameResult(rgb=rgb, mask=mask, timing={"render_ms": ms})


def frame_to_rgb8(frame: FrameResult, alpha: bool = False) -> np.ndarray:
    """Composite for display: (rgb+1)/2*255, optionally with the mask as alpha."""
    rgb = np.clip((frame.rgb_array() + 1.0) / 2.0 * 255.0, 0, 255).astype(np.uint8)
    if not alpha:
        return rgb
    a = np.clip(frame.mask_array() * 255.0, 0, 255).astype(np.uint8)
    return np.concatenate([rgb, a[:, :, None]], axis=2)
