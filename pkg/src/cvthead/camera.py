"""Weak-perspective camera: scaled orthographic projection into NDC and pixels.

Conventions (single source of truth for the whole pipeline):
  u = s*x + tx,  v = -(s*y) + ty  (y flipped to image-down),  d = z.
Depth is untouched by the camera and larger d means closer, so the
rasterizer's z-test is a plain max-compare.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CameraParams:
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"camera scale must be positive, got {self.scale}")

    def to_json(self) -> dict:
        return {"scale": self.scale, "tx": self.tx, "ty": self.ty}

    @classmethod
    def from_json(cls, obj: dict) -> "CameraParams":
        return cls(scale=float(obj["scale"]), tx=float(obj.get("tx", 0.0)), ty=float(obj.get("ty", 0.0)))


def project(points: np.ndarray, cam: CameraParams):
    """Project (...,3) points; returns (u, v, d) arrays of the leading shape."""
    pts = np.asarray(points)
    u = cam.scale * pts[..., 0] + cam.tx
    v = -(cam.scale * pts[..., 1]) + cam.ty
    d = pts[..., 2]
    return u, v, d


def project_point(point, cam: CameraParams) -> tuple[float, float, float]:
    u, v, d = project(np.asarray(point, dtype=np.float64), cam)
    return float(u), float(v), float(d)


def to_pixel(u: float, v: float, width: int, height: int):
    """NDC -> integer pixel, or None when the point falls outside the frame."""
    px = int(np.floor((u + 1.0) / 2.0 * width))
    py = int(np.floor((v + 1.0) / 2.0 * height))
    if 0 <= px < width and 0 <= py < height:
        return px, py
    return None


def to_pixel_array(u: np.ndarray, v: np.ndarray, width: int, height: int):
    """Vectorized to_pixel: returns (px, py, valid) with culled entries masked out."""
    px = np.floor((u + 1.0) / 2.0 * width).astype(np.int64)
    py = np.floor((v + 1.0) / 2.0 * height).astype(np.int64)
    valid = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    return px, py, valid
