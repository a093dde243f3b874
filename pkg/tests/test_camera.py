import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvthead.camera import CameraParams, project, project_point, to_pixel, to_pixel_array
from cvthead.errors import ConfigError

finite = st.floats(-2, 2, allow_nan=False)


def test_identity_scale_convention():
    u, v, d = project_point((0.5, -0.25, 0.1), CameraParams(1.0, 0.0, 0.0))
    assert (u, v, d) == (0.5, 0.25, 0.1)


def test_scale_doubles_uv():
    u, v, d = project_point((0.5, -0.25, 0.1), CameraParams(2.0, 0.0, 0.0))
    assert (u, v) == (1.0, 0.5)
    assert d == pytest.approx(0.1)


def test_translation_shifts_u_only():
    base = project_point((0.3, 0.1, -0.2), CameraParams(1.0, 0.0, 0.0))
    moved = project_point((0.3, 0.1, -0.2), CameraParams(1.0, 0.1, 0.0))
    assert moved[0] == pytest.approx(base[0] + 0.1)
    assert moved[1] == base[1]
    assert moved[2] == base[2]


def test_scale_must_be_positive():
    with pytest.raises(ConfigError):
        CameraParams(scale=0.0)
    with pytest.raises(ConfigError):
        CameraParams(scale=-1.0)


@settings(max_examples=100, deadline=None)
@given(finite, finite, finite, finite, finite, finite,
       st.floats(0.1, 4), finite, finite, st.floats(0, 1))
def test_projection_is_affine(x1, y1, z1, x2, y2, z2, s, tx, ty, alpha):
    cam = CameraParams(s, tx, ty)
    k1 = np.array([x1, y1, z1])
    k2 = np.array([x2, y2, z2])
    mixed = project(alpha * k1 + (1 - alpha) * k2, cam)
    p1 = project(k1, cam)
    p2 = project(k2, cam)
    for m, a, b in zip(mixed, p1, p2):
        assert m == pytest.approx(alpha * a + (1 - alpha) * b, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(finite, finite, st.floats(0.1, 4), finite, finite)
def test_depth_order_camera_invariant(z1, z2, s, tx, ty):
    cam = CameraParams(s, tx, ty)
    _, _, d1 = project_point((0.0, 0.0, z1), cam)
    _, _, d2 = project_point((0.5, 0.5, z2), cam)
    assert (d1 > d2) == (z1 > z2)
    assert d1 == z1 and d2 == z2


class TestToPixel:
    def test_lower_corner(self):
        assert to_pixel(-1.0, -1.0, 256, 256) == (0, 0)

    def test_center(self):
        assert to_pixel(0.0, 0.0, 256, 256) == (128, 128)

    def test_upper_edge_culled(self):
        assert to_pixel(1.0, 0.0, 256, 256) is None
        assert to_pixel(0.0, 1.0, 256, 256) is None

    def test_array_version_matches_scalar(self):
        rng = np.random.default_rng(0)
        u = rng.uniform(-1.3, 1.3, size=100)
        v = rng.uniform(-1.3, 1.3, size=100)
        px, py, valid = to_pixel_array(u, v, 64, 48)
        for i in range(100):
            got = to_pixel(u[i], v[i], 64, 48)
            if got is None:
                assert not valid[i]
            else:
                assert valid[i] and (px[i], py[i]) == got
