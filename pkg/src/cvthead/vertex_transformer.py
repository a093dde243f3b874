"""Per-vertex feature descriptors from a source image.

Coarse mesh vertices become learnable query tokens carrying sine encodings
of their projected (u,v) and depth; a strided CNN turns the image into a
16x-downsampled token grid; a pre-norm encoder stack mixes both; the vertex
slice is projected to descriptor width and upsampled back to the full mesh
through fixed row-stochastic matrices with learnable affine mixers.

Also provides the pixel-aligned sampling baseline (bilinear lookup at each
vertex's projection), which by construction cannot tell apart two vertices
sharing an image location.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import numerics as nm
from .camera import CameraParams, project
from .errors import ConfigError, ShapeError
from .head_model import HeadModel
from .numerics import Tensor, apply_op

Weights = dict[str, Tensor]


@dataclass(frozen=True)
class TransformerConfig:
    n_coarse: int = 314
    width: int = 128          # token width C'
    out_channels: int = 32    # descriptor width C
    n_layers: int = 6
    n_heads: int = 4
    mlp_ratio: int = 4
    cnn_channels: tuple = (32, 64, 128)   # intermediate stages; last conv emits `width`
    n_mix_stages: int = 2
    depth_pos_scale: float = 64.0         # spreads d in [-1,1] across encoding bands

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ConfigError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.width % 4:
            raise ConfigError("width must be divisible by 4 for 2D sine encodings")

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.n_coarse, self.width, self.out_channels, self.n_layers,
             self.n_heads, self.mlp_ratio, len(self.cnn_channels),
             *self.cnn_channels, self.n_mix_stages, self.depth_pos_scale],
            dtype=np.float32)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "TransformerConfig":
        a = [float(x) for x in a]
        n_cnn = int(a[6])
        return cls(
            n_coarse=int(a[0]), width=int(a[1]), out_channels=int(a[2]),
            n_layers=int(a[3]), n_heads=int(a[4]), mlp_ratio=int(a[5]),
            cnn_channels=tuple(int(x) for x in a[7:7 + n_cnn]),
            n_mix_stages=int(a[7 + n_cnn]), depth_pos_scale=a[8 + n_cnn])


@dataclass
class TokenSequence:
    """Concatenated vertex + image tokens: vertices occupy [0, N')."""
    tokens: Tensor
    vertex_count: int
    image_count: int


def sine_encoding_1d(positions, dim: int, dtype=np.float32) -> np.ndarray:
    """Interleaved sin/cos encoding: channel 2i = sin(p / 10000^(2i/dim))."""
    if dim % 2:
        raise ConfigError(f"sine encoding dim must be even, got {dim}")
    p = np.asarray(positions, dtype=np.float64).reshape(-1)
    i = np.arange(dim // 2, dtype=np.float64)
    div = np.power(10000.0, 2.0 * i / dim)
    ang = p[:, None] / div[None, :]
    out = np.empty((p.size, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out.astype(dtype)


def sine_encoding_2d(u_positions, v_positions, dim: int, dtype=np.float32) -> np.ndarray:
    """First dim/2 channels encode u, last dim/2 encode v."""
    if dim % 4:
        raise ConfigError(f"2D sine encoding dim must be divisible by 4, got {dim}")
    eu = sine_encoding_1d(u_positions, dim // 2, dtype)
    ev = sine_encoding_1d(v_positions, dim // 2, dtype)
    if eu.shape[0] != ev.shape[0]:
        raise ShapeError("u and v position counts differ")
    return np.concatenate([eu, ev], axis=1)


# ---------------------------------------------------------------------------
# weights

def _linear_init(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_transformer_weights(config: TransformerConfig, seed: int, dtype=np.float32) -> Weights:
    """Seeded initialization; entry names double as the container schema."""
    rng = np.random.default_rng(seed)
    c = config.width
    w: dict[str, np.ndarray] = {}

    w["vertex_tokens"] = rng.normal(0.0, 1.0, size=(config.n_coarse, c)).astype(dtype)

    for i in range(config.n_layers):
        pre = f"enc.layer{i}"
        for name in ("q", "k", "v", "o"):
            w[f"{pre}.{name}.w"] = _linear_init(rng, c, c, dtype)
            w[f"{pre}.{name}.b"] = np.zeros(c, dtype=dtype)
        hidden = c * config.mlp_ratio
        w[f"{pre}.mlp1.w"] = _linear_init(rng, c, hidden, dtype)
        w[f"{pre}.mlp1.b"] = np.zeros(hidden, dtype=dtype)
        w[f"{pre}.mlp2.w"] = _linear_init(rng, hidden, c, dtype)
        w[f"{pre}.mlp2.b"] = np.zeros(c, dtype=dtype)
        for ln in ("ln1", "ln2"):
            w[f"{pre}.{ln}.w"] = np.ones(c, dtype=dtype)
            w[f"{pre}.{ln}.b"] = np.zeros(c, dtype=dtype)

    w["head.w"] = _linear_init(rng, c, config.out_channels, dtype)
    w["head.b"] = np.zeros(config.out_channels, dtype=dtype)

    chans = [3, *config.cnn_channels, c]
    for i in range(len(chans) - 1):
        cin, cout = chans[i], chans[i + 1]
        std = math.sqrt(2.0 / (cin * 16))
        w[f"cnn.conv{i}.w"] = rng.normal(0.0, std, size=(cout, cin, 4, 4)).astype(dtype)
        w[f"cnn.conv{i}.b"] = np.zeros(cout, dtype=dtype)

    co = config.out_channels
    for i in range(config.n_mix_stages):
        w[f"mix{i}.w"] = (np.eye(co) + rng.normal(0.0, 0.02, size=(co, co))).astype(dtype)
        w[f"mix{i}.b"] = np.zeros(co, dtype=dtype)

    return {k: Tensor(v, dtype=dtype, requires_grad=True) for k, v in w.items()}


def _linear(x: Tensor, weights: Weights, name: str) -> Tensor:
    return nm.add(nm.matmul(x, weights[f"{name}.w"]), weights[f"{name}.b"])


# ---------------------------------------------------------------------------
# forward stages

def encode_image(image: Union[Tensor, np.ndarray], weights: Weights,
                 config: TransformerConfig) -> tuple[Tensor, tuple[int, int]]:
    """Strided conv stack: (3,H,W) -> ((H/16)*(W/16), width) tokens.

    Returns the token matrix and the (rows, cols) grid shape.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"image must be (3,H,W), got {x.shape}")
    _, h, w = x.shape
    if h % 16 or w % 16:
        raise ShapeError(f"image dims must be divisible by 16, got {h}x{w}")
    n_convs = len(config.cnn_channels) + 1
    for i in range(n_convs):
        x = nm.conv2d(x, weights[f"cnn.conv{i}.w"], weights[f"cnn.conv{i}.b"],
                      stride=2, padding=1)
        x = nm.gelu(x)
    gh, gw = h // 16, w // 16
    tokens = nm.reshape(nm.transpose(x, (1, 2, 0)), (gh * gw, config.width))
    return tokens, (gh, gw)


def build_tokens(
    weights: Weights,
    source_vertices: np.ndarray,
    camera: CameraParams,
    image_tokens: Tensor,
    grid_shape: tuple[int, int],
    config: TransformerConfig,
    use_positional: bool = True,
) -> TokenSequence:
    """Assemble the encoder input: [vertex tokens + encodings; image tokens + grid encoding].

    source_vertices must be the coarse subset (N' rows); out-of-frame vertices
    keep their unclamped encodings, culling only happens at rasterization.
    """
    verts = np.asarray(source_vertices, dtype=np.float32)
    if verts.shape != (config.n_coarse, 3):
        raise ShapeError(
            f"expected {config.n_coarse} coarse vertices, got {verts.shape}")
    xv = weights["vertex_tokens"]
    dtype = xv.dtype
    gh, gw = grid_shape
    if image_tokens.shape != (gh * gw, config.width):
        raise ShapeError(
            f"image tokens {image_tokens.shape} do not match grid {grid_shape} x width {config.width}")

    if use_positional:
        u, v, d = project(verts, camera)
        e_uv = sine_encoding_2d(u, v, config.width, dtype)
        e_dep = sine_encoding_1d(d * config.depth_pos_scale, config.width, dtype)
        vertex_tokens = nm.add(nm.add(xv, Tensor(e_uv, dtype=dtype)), Tensor(e_dep, dtype=dtype))
        ys, xs = np.divmod(np.arange(gh * gw), gw)
        e_grid = sine_encoding_2d(xs, ys, config.width, dtype)
        img = nm.add(image_tokens, Tensor(e_grid, dtype=dtype))
    else:
        vertex_tokens = xv
        img = image_tokens

    tokens = nm.concat([vertex_tokens, img], axis=0)
    return TokenSequence(tokens=tokens, vertex_count=config.n_coarse, image_count=gh * gw)


def _mhsa(x: Tensor, weights: Weights, prefix: str, config: TransformerConfig) -> Tensor:
    t = x.shape[0]
    h, d = config.n_heads, config.head_dim
    q = _linear(x, weights, f"{prefix}.q")
    k = _linear(x, weights, f"{prefix}.k")
    v = _linear(x, weights, f"{prefix}.v")

    def split_heads(m):
        return nm.transpose(nm.reshape(m, (t, h, d)), (1, 0, 2))

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    scores = nm.mul(nm.matmul(qh, nm.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(d))
    attn = nm.softmax(scores, axis=-1)
    mixed = nm.matmul(attn, vh)                                # (H,T,D)
    merged = nm.reshape(nm.transpose(mixed, (1, 0, 2)), (t, h * d))
    return _linear(merged, weights, f"{prefix}.o")


def transformer_forward(seq: TokenSequence, weights: Weights, config: TransformerConfig) -> Tensor:
    """Pre-norm encoder stack; returns the vertex-slice states (N', width)."""
    x = seq.tokens
    if x.shape[1] != config.width:
        raise ShapeError(f"token width {x.shape[1]} != config width {config.width}")
    for i in range(config.n_layers):
        pre = f"enc.layer{i}"
        hn = nm.layer_norm(x, weights[f"{pre}.ln1.w"], weights[f"{pre}.ln1.b"])
        x = nm.add(x, _mhsa(hn, weights, pre, config))
        hn = nm.layer_norm(x, weights[f"{pre}.ln2.w"], weights[f"{pre}.ln2.b"])
        m = _linear(nm.gelu(_linear(hn, weights, f"{pre}.mlp1")), weights, f"{pre}.mlp2")
        x = nm.add(x, m)
    return nm.narrow(x, 0, 0, seq.vertex_count)


def project_descriptors(states: Tensor, weights: Weights) -> Tensor:
    """Affine map from token width to descriptor width."""
    if states.shape[1] != weights["head.w"].shape[0]:
        raise ShapeError(
            f"states width {states.shape[1]} != head input {weights['head.w'].shape[0]}")
    return _linear(states, weights, "head")


def spmm(matrix, x: Tensor) -> Tensor:
    """Sparse-dense product with gradient through the dense side."""
    out = np.asarray(matrix @ x.numpy(), dtype=x.dtype)
    mt = matrix.T.tocsr()

    def bwd(g):
        return (np.asarray(mt @ g, dtype=g.dtype),)

    return apply_op("spmm", (x,), out, bwd)


def upsample_descriptors(coarse: Tensor, model: HeadModel, weights: Weights,
                         config: TransformerConfig) -> Tensor:
    """Coarse descriptors to full-mesh resolution through the upsample chain."""
    if coarse.shape[0] != model.n_coarse:
        raise ShapeError(f"coarse rows {coarse.shape[0]} != model N' {model.n_coarse}")
    if len(model.upsample_chain) != config.n_mix_stages:
        raise ShapeError(
            f"model chain has {len(model.upsample_chain)} stages, config expects {config.n_mix_stages}")
    x = coarse
    for i, m in enumerate(model.upsample_chain):
        x = spmm(m, x)
        x = _linear(x, weights, f"mix{i}")
    return x


def compute_descriptors(
    model: HeadModel,
    weights: Weights,
    config: TransformerConfig,
    source_image: Union[Tensor, np.ndarray],
    source_vertices: np.ndarray,
    source_camera: CameraParams,
    use_positional: bool = True,
) -> Tensor:
    """Full source-side pass: image + source mesh -> (N, C) descriptors."""
    image_tokens, grid = encode_image(source_image, weights, config)
    coarse = model.coarse_vertices(np.asarray(source_vertices, dtype=np.float32))
    seq = build_tokens(weights, coarse, source_camera, image_tokens, grid, config,
                       use_positional=use_positional)
    states = transformer_forward(seq, weights, config)
    return upsample_descriptors(project_descriptors(states, weights), model, weights, config)


# ---------------------------------------------------------------------------
# ablation baseline

def pixel_aligned_features(feature_map: np.ndarray, vertices: np.ndarray,
                           camera: CameraParams) -> np.ndarray:
    """Bilinear feature lookup at each vertex's 2D projection (no attention).

    Vertices sharing a projected (u,v) receive identical features regardless
    of depth; out-of-frame projections sample border-clamped values.
    """
    fmap = np.asarray(feature_map, dtype=np.float32)
    if fmap.ndim != 3:
        raise ShapeError(f"feature map must be (C,h,w), got {fmap.shape}")
    c, fh, fw = fmap.shape
    u, v, _ = project(np.asarray(vertices, dtype=np.float32), camera)
    fx = np.clip((u + 1.0) / 2.0 * fw - 0.5, 0.0, fw - 1.0)
    fy = np.clip((v + 1.0) / 2.0 * fh - 0.5, 0.0, fh - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, fw - 1)
    y1 = np.minimum(y0 + 1, fh - 1)
    wx = (fx - x0).astype(np.float32)
    wy = (fy - y0).astype(np.float32)
    f00 = fmap[:, y0, x0]
    f01 = fmap[:, y0, x1]
    f10 = fmap[:, y1, x0]
    f11 = fmap[:, y1, x1]
    top = f00 * (1 - wx) + f01 * wx
    bot = f10 * (1 - wx) + f11 * wx
    return (top * (1 - wy) + bot * wy).T.copy()
