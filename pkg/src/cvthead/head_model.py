"""Parametric head mesh: blendshapes + linear blend skinning, model I/O,
and a procedural synthetic head generator (ellipsoid base, smooth random
blendshapes, distance-falloff skinning, farthest-point coarse sampling).

Vertex layout is canonical NDC scale: the head roughly fills [-0.55, 0.55]
and faces +z (camera side, larger z = closer).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial import ConvexHull, cKDTree

from .camera import CameraParams
from .errors import FormatError, ShapeError
from .numerics import load_container, save_container


@dataclass
class HeadModel:
    template: np.ndarray            # (N,3) float32
    shape_basis: np.ndarray         # (N,3,L)
    expr_basis: np.ndarray          # (N,3,K)
    skin_weights: np.ndarray        # (N,J), convex rows
    joint_regressor: csr_matrix     # (J,N) sparse
    kinematic_parents: np.ndarray   # (J,) int, -1 for root
    faces: np.ndarray               # (F,3) int32 triangles
    coarse_index: np.ndarray        # (N',) int32
    upsample_chain: list            # csr matrices composing N' -> N

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_coarse(self) -> int:
        return self.coarse_index.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def n_joints(self) -> int:
        return self.skin_weights.shape[1]

    @property
    def theta_len(self) -> int:
        return 3 * self.n_joints + 3

    def validate(self) -> None:
        """Check every structural invariant; raises FormatError naming the offender."""
        n = self.n_vertices
        if self.template.shape != (n, 3):
            raise FormatError("template must be (N,3)")
        if self.shape_basis.shape[:2] != (n, 3) or self.expr_basis.shape[:2] != (n, 3):
            raise FormatError("blendshape bases must be (N,3,·)")
        w = self.skin_weights
        if w.shape[0] != n:
            raise FormatError("skin_weights row count must equal N")
        if np.any(w < -1e-7):
            raise FormatError("skin_weights has negative entries")
        sums = w.sum(axis=1)
        bad = np.argmax(np.abs(sums - 1.0))
        if abs(sums[bad] - 1.0) > 1e-6:
            raise FormatError(
                f"skin_weights row {bad} sums to {sums[bad]:.6f}, expected 1")
        if self.joint_regressor.shape != (self.n_joints, n):
            raise FormatError("joint_regressor must be (J,N)")
        ci = self.coarse_index
        if len(np.unique(ci)) != len(ci) or ci.min() < 0 or ci.max() >= n:
            raise FormatError("coarse_index entries must be unique and < N")
        rows = self.n_coarse
        for i, m in enumerate(self.upsample_chain):
            if m.shape[1] != rows:
                raise FormatError(f"upsample_{i} expects {rows} input rows, has {m.shape[1]}")
            rows = m.shape[0]
        if rows != n:
            raise FormatError(f"upsample chain composes N'->{rows}, expected {n}")
        parents = self.kinematic_parents
        if len(parents) != self.n_joints:
            raise FormatError("kinematic_parents length must equal J")
        roots = np.flatnonzero(parents < 0)
        if len(roots) == 0:
            raise FormatError("kinematic_parents has no root")
        # acyclicity: walking to the root must terminate for every joint
        for j in range(len(parents)):
            seen, p = set(), j
            while p >= 0:
                if p in seen:
                    raise FormatError("kinematic_parents contains a cycle")
                seen.add(p)
                p = int(parents[p])

    def coarse_vertices(self, vertices: np.ndarray) -> np.ndarray:
        return vertices[self.coarse_index]


@dataclass
class AvatarParams:
    """Full control vector for one frame: shape, expression, pose, camera, offsets."""
    beta: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    camera: CameraParams = field(default_factory=CameraParams)
    offsets: Optional[np.ndarray] = None

    def to_json(self) -> dict:
        return {
            "beta": [float(x) for x in self.beta],
            "phi": [float(x) for x in self.phi],
            "theta": [float(x) for x in self.theta],
            "camera": self.camera.to_json(),
            "offsets": None if self.offsets is None else [[float(v) for v in row] for row in self.offsets],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AvatarParams":
        offsets = obj.get("offsets")
        return cls(
            beta=np.asarray(obj["beta"], dtype=np.float32),
            phi=np.asarray(obj["phi"], dtype=np.float32),
            theta=np.asarray(obj["theta"], dtype=np.float32),
            camera=CameraParams.from_json(obj.get("camera", {"scale": 1.0})),
            offsets=None if offsets is None else np.asarray(offsets, dtype=np.float32),
        )


def neutral_params(model: HeadModel, camera: Optional[CameraParams] = None) -> AvatarParams:
    return AvatarParams(
        beta=np.zeros(model.n_shape, dtype=np.float32),
        phi=np.zeros(model.n_expr, dtype=np.float32),
        theta=np.zeros(model.theta_len, dtype=np.float32),
        camera=camera or CameraParams(),
    )


def validate_params(model: HeadModel, p: AvatarParams) -> None:
    """Shape-check params against a model; raises ShapeError naming the field."""
    if p.beta.shape != (model.n_shape,):
        raise ShapeError(f"beta must have length {model.n_shape}, got {p.beta.shape}")
    if p.phi.shape != (model.n_expr,):
        raise ShapeError(f"phi must have length {model.n_expr}, got {p.phi.shape}")
    if p.theta.shape != (model.theta_len,):
        raise ShapeError(f"theta must have length {model.theta_len}, got {p.theta.shape}")
    if p.offsets is not None and p.offsets.shape != (model.n_vertices, 3):
        raise ShapeError(f"offsets must be ({model.n_vertices},3), got {p.offsets.shape}")


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle (3,) to rotation matrix; exact identity at zero."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    angle = float(np.linalg.norm(aa))
    if angle < 1e-12:
        return np.eye(3)
    axis = aa / angle
    kx, ky, kz = axis
    k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def apply_blendshapes(model: HeadModel, beta, phi) -> np.ndarray:
    """Template plus shape/expression blendshape displacements (pre-pose)."""
    beta = np.asarray(beta, dtype=np.float32)
    phi = np.asarray(phi, dtype=np.float32)
    if beta.shape != (model.n_shape,):
        raise ShapeError(f"beta must have length {model.n_shape}, got {beta.shape}")
    if phi.shape != (model.n_expr,):
        raise ShapeError(f"phi must have length {model.n_expr}, got {phi.shape}")
    n = model.n_vertices
    out = model.template.copy()
    out += (model.shape_basis.reshape(n * 3, -1) @ beta).reshape(n, 3)
    out += (model.expr_basis.reshape(n * 3, -1) @ phi).reshape(n, 3)
    return out


def _joint_order(parents: np.ndarray) -> list[int]:
    """Topological order: every joint after its parent."""
    order, placed = [], set()
    remaining = list(range(len(parents)))
    while remaining:
        progressed = False
        for j in remaining[:]:
            p = int(parents[j])
            if p < 0 or p in placed:
                order.append(j)
                placed.add(j)
                remaining.remove(j)
                progressed = True
        if not progressed:
            raise FormatError("kinematic_parents contains a cycle")
    return order


def apply_lbs(model: HeadModel, vertices: np.ndarray, theta) -> np.ndarray:
    """Pose blendshaped vertices: per-joint rotations blended by skin weights,
    then the global rotation about the origin.

    theta layout: [global(3), joint_0(3), ..., joint_{J-1}(3)] axis-angle radians.
    Joints are regressed from the incoming (pre-pose) vertices.
    """
    verts = np.asarray(vertices, dtype=np.float32)
    if verts.shape != (model.n_vertices, 3):
        raise ShapeError(f"vertices must be ({model.n_vertices},3), got {verts.shape}")
    theta = np.asarray(theta, dtype=np.float32)
    if theta.shape != (model.theta_len,):
        raise ShapeError(f"theta must have length {model.theta_len}, got {theta.shape}")

    nj = model.n_joints
    joints = np.asarray(model.joint_regressor @ verts, dtype=np.float64)  # (J,3)
    parents = model.kinematic_parents

    rot_world = [None] * nj
    t_world = [None] * nj
    for j in _joint_order(parents):
        r_local = rodrigues(theta[3 + 3 * j : 6 + 3 * j])
        p = int(parents[j])
        if p < 0:
            rot_world[j] = r_local
            t_world[j] = joints[j]
        else:
            rot_world[j] = rot_world[p] @ r_local
            t_world[j] = rot_world[p] @ (joints[j] - joints[p]) + t_world[p]

    # rest-pose correction: each joint transform acts about its own rest location
    out = np.zeros((model.n_vertices, 3), dtype=np.float64)
    v64 = verts.astype(np.float64)
    w = model.skin_weights.astype(np.float64)
    for j in range(nj):
        t_corr = t_world[j] - rot_world[j] @ joints[j]
        out += w[:, j : j + 1] * (v64 @ rot_world[j].T + t_corr)

    r_global = rodrigues(theta[:3])
    out = out @ r_global.T
    return out.astype(np.float32)


def reconstruct(model: HeadModel, beta, phi, theta) -> np.ndarray:
    """Full parametric reconstruction: blendshapes then skinning."""
    return apply_lbs(model, apply_blendshapes(model, beta, phi), theta)


def drive_vertices(
    model: HeadModel,
    beta_src,
    phi_drv,
    theta_drv,
    offsets: Optional[np.ndarray] = None,
    offset_space: str = "canonical",
) -> np.ndarray:
    """Driven vertices: source shape under driving expression/pose, plus
    externally supplied per-vertex offsets (hair/shoulder deformation).

    offset_space="canonical" (default) adds offsets before skinning so they
    follow head pose; "world" adds them after, the strict post-reconstruction
    reading.
    """
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float32)
        if offsets.shape != (model.n_vertices, 3):
            raise ShapeError(
                f"offsets must be ({model.n_vertices},3), got {offsets.shape}")
    if offset_space not in ("canonical", "world"):
        raise ShapeError(f"offset_space must be canonical|world, got {offset_space!r}")

    blended = apply_blendshapes(model, beta_src, phi_drv)
    if offsets is not None and offset_space == "canonical":
        blended = blended + offsets
    posed = apply_lbs(model, blended, theta_drv)
    if offsets is not None and offset_space == "world":
        posed = posed + offsets
    return posed


def vertices_for_params(model: HeadModel, params: AvatarParams, offset_space: str = "canonical") -> np.ndarray:
    return drive_vertices(model, params.beta, params.phi, params.theta,
                          offsets=params.offsets, offset_space=offset_space)


# ---------------------------------------------------------------------------
# synthetic model generation

_HALF_EXTENTS = np.array([0.40, 0.55, 0.45])

_JOINT_SPOTS = {
    "neck": np.array([0.0, -0.50, -0.02]),
    "jaw": np.array([0.0, -0.28, 0.32]),
    "eye_l": np.array([-0.16, 0.10, 0.36]),
    "eye_r": np.array([0.16, 0.10, 0.36]),
}
_JOINT_SIGMA = {"neck": 0.70, "jaw": 0.16, "eye_l": 0.08, "eye_r": 0.08}
_EYEBALL_RADIUS = 0.07


def _fibonacci_ellipsoid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Evenly distributed points on an ellipsoid plus their unit-sphere coords."""
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    ang = golden * i
    unit = np.stack([r * np.cos(ang), y, r * np.sin(ang)], axis=1)
    return unit * _HALF_EXTENTS, unit


def _oriented_hull_faces(verts: np.ndarray) -> np.ndarray:
    hull = ConvexHull(verts)
    faces = hull.simplices.astype(np.int32)
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    normals = np.cross(b - a, c - a)
    centroid = (a + b + c) / 3.0
    flip = np.einsum("ij,ij->i", normals, centroid) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _smooth_field(rng: np.random.Generator, unit: np.ndarray, n_waves: int = 3) -> np.ndarray:
    """Low-frequency random displacement field over the mesh: sum of 3D sinusoids."""
    n = unit.shape[0]
    out = np.zeros((n, 3))
    for _ in range(n_waves):
        freq = rng.uniform(1.0, 3.0, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.normal(0, 1.0, size=3)
        s = np.sin(unit @ freq + phase[0]) * np.cos(unit @ np.roll(freq, 1) + phase[1])
        out += np.outer(s, amp)
    return out / n_waves


def _farthest_point_order(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling order; first k entries are the FPS k-set."""
    n = points.shape[0]
    order = np.empty(count, dtype=np.int64)
    order[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for k in range(1, count):
        nxt = int(np.argmax(dist))
        order[k] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return order


def _knn_interp_matrix(src_points: np.ndarray, dst_points: np.ndarray,
                       src_ids: np.ndarray, dst_ids: np.ndarray, k: int = 3) -> csr_matrix:
    """Row-stochastic interpolation from src level to dst level.

    Destination vertices that exist in the source level copy themselves
    exactly; others take inverse-distance weights over their k nearest
    source vertices.
    """
    pos_in_src = {int(v): i for i, v in enumerate(src_ids)}
    tree = cKDTree(src_points)
    rows, cols, vals = [], [], []
    for r, v in enumerate(dst_ids):
        hit = pos_in_src.get(int(v))
        if hit is not None:
            rows.append(r)
            cols.append(hit)
            vals.append(1.0)
            continue
        dd, jj = tree.query(dst_points[r], k=k)
        w = 1.0 / (dd + 1e-9)
        w = w / w.sum()
        for weight, col in zip(w, jj):
            rows.append(r)
            cols.append(int(col))
            vals.append(float(weight))
    m = csr_matrix((np.asarray(vals, dtype=np.float32), (rows, cols)),
                   shape=(len(dst_ids), len(src_ids)))
    # renormalize in float32 so row sums are exactly-as-stored stochastic
    scale = 1.0 / np.asarray(m.sum(axis=1)).reshape(-1)
    m = csr_matrix(m.multiply(scale[:, None]), dtype=np.float32)
    return m


def generate_synthetic_model(
    seed: int,
    n_vertices: int = 5023,
    n_coarse: int = 314,
    shape_dims: int = 20,
    expr_dims: int = 10,
    joints: int = 4,
) -> HeadModel:
    """Deterministic synthetic head standing in for licensed scan-derived assets.

    Ellipsoidal mesh facing +z, smooth random blendshapes (expression bases
    concentrated on the face), anatomical jaw/neck/eye joints with
    distance-falloff skinning (eyeballs bound rigidly), farthest-point coarse
    sampling and a two-stage barycentric-style upsample chain.
    """
    if not n_coarse < n_vertices:
        raise ShapeError("n_coarse must be smaller than n_vertices")
    if joints != 4:
        raise ShapeError("synthetic generator places exactly 4 joints (neck, jaw, eyes)")
    rng = np.random.default_rng(seed)

    verts, unit = _fibonacci_ellipsoid(n_vertices)
    faces = _oriented_hull_faces(verts)

    shape_basis = np.empty((n_vertices, 3, shape_dims), dtype=np.float32)
    for l in range(shape_dims):
        shape_basis[:, :, l] = (0.05 * _smooth_field(rng, unit)).astype(np.float32)

    # expressions act mostly on the face (front hemisphere, lower half)
    front = np.clip(unit[:, 2], 0.0, 1.0)
    lower = np.clip(-unit[:, 1] + 0.5, 0.0, 1.0)
    expr_mask = (0.15 + 0.85 * front * lower)[:, None]
    expr_basis = np.empty((n_vertices, 3, expr_dims), dtype=np.float32)
    for k in range(expr_dims):
        expr_basis[:, :, k] = (0.06 * expr_mask * _smooth_field(rng, unit)).astype(np.float32)

    joint_names = list(_JOINT_SPOTS)
    joint_pos = np.stack([_JOINT_SPOTS[j] for j in joint_names])

    # joint regressor: uniform weights over the 8 template vertices nearest
    # each anatomical spot
    tree = cKDTree(verts)
    rows, cols, vals = [], [], []
    for j, name in enumerate(joint_names):
        _, idx = tree.query(_JOINT_SPOTS[name], k=8)
        for i in idx:
            rows.append(j)
            cols.append(int(i))
            vals.append(1.0 / 8.0)
    joint_regressor = csr_matrix(
        (np.asarray(vals, dtype=np.float32), (rows, cols)), shape=(joints, n_vertices))

    dist = np.linalg.norm(verts[:, None, :] - joint_pos[None, :, :], axis=2)  # (N,J)
    sigma = np.array([_JOINT_SIGMA[n] for n in joint_names])
    w = np.exp(-0.5 * (dist / sigma) ** 2)
    w = w / w.sum(axis=1, keepdims=True)
    # eyeballs are rigid: bind them fully to their eye joint
    for j, name in enumerate(joint_names):
        if name.startswith("eye"):
            ball = dist[:, j] < _EYEBALL_RADIUS
            w[ball] = 0.0
            w[ball, j] = 1.0
    skin = w.astype(np.float32)
    skin = skin / skin.sum(axis=1, keepdims=True)

    parents = np.array([-1, 0, 0, 0], dtype=np.int32)  # neck <- jaw, eyes

    n_mid = min(4 * n_coarse, n_vertices)
    fps = _farthest_point_order(verts, n_mid, start=0)
    coarse_ids = np.sort(fps[:n_coarse]).astype(np.int32)
    mid_ids = np.sort(fps[:n_mid]).astype(np.int64)
    all_ids = np.arange(n_vertices, dtype=np.int64)

    m0 = _knn_interp_matrix(verts[coarse_ids], verts[mid_ids], coarse_ids, mid_ids)
    m1 = _knn_interp_matrix(verts[mid_ids], verts, mid_ids, all_ids)

    model = HeadModel(
        template=verts.astype(np.float32),
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        skin_weights=skin,
        joint_regressor=joint_regressor,
        kinematic_parents=parents,
        faces=faces,
        coarse_index=coarse_ids,
        upsample_chain=[m0, m1],
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# persistence (CVTH container)

def _sparse_entries(name: str, m: csr_matrix) -> dict[str, np.ndarray]:
    coo = m.tocoo()
    return {
        f"{name}_rows": coo.row.astype(np.float32),
        f"{name}_cols": coo.col.astype(np.float32),
        f"{name}_vals": coo.data.astype(np.float32),
        f"{name}_shape": np.asarray(coo.shape, dtype=np.float32),
    }


def _sparse_from_entries(entries: dict, name: str) -> csr_matrix:
    try:
        rows = entries[f"{name}_rows"].astype(np.int64)
        cols = entries[f"{name}_cols"].astype(np.int64)
        vals = entries[f"{name}_vals"].astype(np.float32)
        shape = tuple(entries[f"{name}_shape"].astype(np.int64))
    except KeyError as e:
        raise FormatError(f"missing sparse entry {e.args[0]!r}") from e
    return csr_matrix((vals, (rows, cols)), shape=shape)


def save_model(model: HeadModel, path) -> None:
    entries: dict[str, np.ndarray] = {
        "template": model.template,
        "shape_basis": model.shape_basis,
        "expr_basis": model.expr_basis,
        "skin_weights": model.skin_weights,
        "parents": model.kinematic_parents.astype(np.float32),
        "faces": model.faces.astype(np.float32),
        "coarse_index": model.coarse_index.astype(np.float32),
    }
    entries.update(_sparse_entries("joint_regressor", model.joint_regressor))
    for i, m in enumerate(model.upsample_chain):
        entries.update(_sparse_entries(f"upsample_{i}", m))
    save_container(path, entries)


def load_model(path) -> HeadModel:
    entries = load_container(path)
    required = ("template", "shape_basis", "expr_basis", "skin_weights",
                "parents", "faces", "coarse_index")
    for name in required:
        if name not in entries:
            raise FormatError(f"model container missing entry {name!r}")
    chain = []
    i = 0
    while f"upsample_{i}_shape" in entries:
        chain.append(_sparse_from_entries(entries, f"upsample_{i}"))
        i += 1
    if not chain:
        raise FormatError("model container has no upsample chain")
    model = HeadModel(
        template=entries["template"],
        shape_basis=entries["shape_basis"],
        expr_basis=entries["expr_basis"],
        skin_weights=entries["skin_weights"],
        joint_regressor=_sparse_from_entries(entries, "joint_regressor"),
        kinematic_parents=entries["parents"].astype(np.int32),
        faces=entries["faces"].astype(np.int32),
        coarse_index=entries["coarse_index"].astype(np.int32),
        upsample_chain=chain,
    )
    model.validate()
    return model
