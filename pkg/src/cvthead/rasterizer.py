"""Single-pixel point splatting with nearest-vertex z-buffering.

Each vertex writes its descriptor into the one pixel its projection floors
to. Conflicts keep the larger depth (closer under the camera convention),
ties the smaller vertex index, which makes the result independent of
processing order. Unoccupied pixels hold the background constant and depth
0; occupied depths are normalized to [0,1] per frame.

Gradients flow through descriptors only; vertex positions are not
differentiable through the splat.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .camera import CameraParams, project, to_pixel_array
from .errors import ShapeError
from .numerics import Tensor, apply_op

DEFAULT_BACKGROUND = 0.0


@dataclass
class SplatImage:
    features: Tensor          # (H,W,C); tracked on the tape when descriptors are
    depth: np.ndarray         # (H,W) float32, occupied pixels normalized to [0,1]
    occupancy: np.ndarray     # (H,W) bool, internal/testing only
    winner: np.ndarray        # (H,W) int32 vertex index, -1 where background

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]


def _resolve(vertices: np.ndarray, cam: CameraParams, width: int, height: int):
    """Winning vertex per pixel: returns (flat pixel ids, vertex ids, raw depths)."""
    u, v, d = project(vertices, cam)
    px, py, valid = to_pixel_array(u, v, width, height)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return idx, idx, d
    pix = py[idx] * width + px[idx]
    dv = d[idx]
    # depth ascending with ties on descending vertex index, then scatter:
    # the last write per pixel is the closest vertex, smaller index on ties
    order = np.lexsort((-idx, dv))
    winner = np.full(width * height, -1, dtype=np.int64)
    winner[pix[order]] = idx[order]
    win_pix = np.flatnonzero(winner >= 0)
    return win_pix, winner[win_pix], d


def splat(
    vertices: np.ndarray,
    descriptors: Union[Tensor, np.ndarray],
    cam: CameraParams,
    width: int,
    height: int,
    background: float = DEFAULT_BACKGROUND,
) -> SplatImage:
    """Rasterize per-vertex descriptors and depths into image-aligned planes."""
    vertices = np.asarray(vertices, dtype=np.float32)
    desc_t = descriptors if isinstance(descriptors, Tensor) else None
    desc = desc_t.numpy() if desc_t is not None else np.asarray(descriptors, dtype=np.float32)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ShapeError(f"vertices must be (N,3), got {vertices.shape}")
    if desc.ndim != 2 or desc.shape[0] != vertices.shape[0]:
        raise ShapeError(
            f"descriptors must be ({vertices.shape[0]},C), got {desc.shape}")
    channels = desc.shape[1]
    dtype = desc.dtype

    win_pix, win_vertex, d = _resolve(vertices, cam, width, height)

    if background == 0.0:
        features = np.zeros((height * width, channels), dtype=dtype)
    else:
        features = np.full((height * width, channels), background, dtype=dtype)
    depth = np.zeros(height * width, dtype=np.float32)
    occupancy = np.zeros(height * width, dtype=bool)
    winner = np.full(height * width, -1, dtype=np.int32)

    if win_pix.size:
        features[win_pix] = desc[win_vertex]
        dw = d[win_vertex].astype(np.float32)
        dmin, dmax = dw.min(), dw.max()
        depth[win_pix] = (dw - dmin) / (dmax - dmin) if dmax > dmin else dw
        occupancy[win_pix] = True
        winner[win_pix] = win_vertex

    features = features.reshape(height, width, channels)
    n_vertices = vertices.shape[0]

    if desc_t is not None:
        pix_cache, vert_cache = win_pix, win_vertex

        def bwd(g):
            gd = np.zeros((n_vertices, channels), dtype=g.dtype)
            if pix_cache.size:
                gd[vert_cache] = g.reshape(-1, channels)[pix_cache]
            return (gd,)

        features_t = apply_op("splat", (desc_t,), features, bwd)
    else:
        features_t = Tensor._wrap(features)

    return SplatImage(
        features=features_t,
        depth=depth.reshape(height, width),
        occupancy=occupancy.reshape(height, width),
        winner=winner.reshape(height, width),
    )


def splat_view(s: SplatImage) -> np.ndarray:
    """Debug view: feature channels 0-2 linearly mapped to 8-bit RGB."""
    c = min(3, s.channels)
    plane = s.features.numpy()[:, :, :c].astype(np.float32)
    lo, hi = float(plane.min()), float(plane.max())
    scaled = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
    out = np.zeros((s.height, s.width, 3), dtype=np.uint8)
    out[:, :, :c] = np.clip(scaled * 255.0, 0, 255).astype(np.uint8)
    return out


def depth_view(s: SplatImage) -> np.ndarray:
    """Debug view: depth plane to 8-bit grayscale."""
    return np.clip(s.depth * 255.0, 0, 255).astype(np.uint8)
