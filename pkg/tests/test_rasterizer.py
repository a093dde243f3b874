import numpy as np
import pytest

import cvthead.numerics as nm
from cvthead.camera import CameraParams, project, to_pixel_array
from cvthead.errors import ShapeError
from cvthead.rasterizer import DEFAULT_BACKGROUND, SplatImage, depth_view, splat, splat_view


def splat_oracle(vertices, desc, cam, width, height, background=0.0, order=None):
    """Sequential z-buffer straight from the definition, any processing order."""
    n, c = desc.shape
    u, v, d = project(np.asarray(vertices, dtype=np.float32), cam)
    px, py, valid = to_pixel_array(u, v, width, height)
    best: dict[tuple, tuple] = {}
    for i in (order if order is not None else range(n)):
        if not valid[i]:
            continue
        key = (int(py[i]), int(px[i]))
        cur = best.get(key)
        if cur is None or d[i] > cur[0] or (d[i] == cur[0] and i < cur[1]):
            best[key] = (d[i], i)

    features = np.full((height, width, c), background, dtype=np.float32)
    depth = np.zeros((height, width), dtype=np.float32)
    occupancy = np.zeros((height, width), dtype=bool)
    winner = np.full((height, width), -1, dtype=np.int32)
    if best:
        dws = np.array([val[0] for val in best.values()], dtype=np.float32)
        dmin, dmax = dws.min(), dws.max()
        for (y, x), (dw, i) in best.items():
            features[y, x] = desc[i]
            dw32 = np.float32(dw)
            depth[y, x] = (dw32 - dmin) / (dmax - dmin) if dmax > dmin else dw32
            occupancy[y, x] = True
            winner[y, x] = i
    return features, depth, occupancy, winner


def assert_bitwise(s: SplatImage, oracle):
    f, d, o, w = oracle
    assert np.array_equal(s.features.numpy(), f)
    assert np.array_equal(s.depth, d)
    assert np.array_equal(s.occupancy, o)
    assert np.array_equal(s.winner, w)


def ndc_for_pixel(px, py, width, height):
    """Center-of-pixel NDC coordinates for a camera at identity."""
    u = (px + 0.5) / width * 2 - 1
    v = (py + 0.5) / height * 2 - 1
    return u, -v  # undo the projection y-flip


class TestSingleSplat:
    def test_one_vertex_one_pixel(self):
        cam = CameraParams()
        x, y = ndc_for_pixel(3, 4, 16, 16)
        verts = np.array([[x, y, 0.2]], dtype=np.float32)
        desc = np.array([[1.0, 2.0, 3.0, 4.0]], dtype=np.float32)
        s = splat(verts, desc, cam, 16, 16)
        assert np.array_equal(s.features.numpy()[4, 3], desc[0])
        mask = np.ones((16, 16), dtype=bool)
        mask[4, 3] = False
        assert np.all(s.features.numpy()[mask] == DEFAULT_BACKGROUND)
        assert s.occupancy.sum() == 1
        # single occupied pixel: dmax == dmin, depth stored raw
        assert s.depth[4, 3] == np.float32(0.2)

    def test_deeper_vertex_wins(self):
        cam = CameraParams()
        x, y = ndc_for_pixel(5, 5, 16, 16)
        verts = np.array([[x, y, 0.3], [x, y, 0.7]], dtype=np.float32)
        desc = np.array([[1.0], [2.0]], dtype=np.float32)
        s = splat(verts, desc, cam, 16, 16)
        assert s.features.numpy()[5, 5, 0] == 2.0
        assert s.winner[5, 5] == 1
        assert_bitwise(s, splat_oracle(verts, desc, cam, 16, 16))

    def test_equal_depth_smaller_index_wins(self):
        cam = CameraParams()
        x, y = ndc_for_pixel(2, 2, 8, 8)
        verts = np.array([[x, y, 0.5], [x, y, 0.5]], dtype=np.float32)
        desc = np.array([[10.0], [20.0]], dtype=np.float32)
        s = splat(verts, desc, cam, 8, 8)
        assert s.winner[2, 2] == 0
        assert s.features.numpy()[2, 2, 0] == 10.0

    def test_out_of_frame_culled(self):
        cam = CameraParams()
        verts = np.array([[1.2, 0.0, 0.1]], dtype=np.float32)
        desc = np.ones((1, 2), dtype=np.float32)
        s = splat(verts, desc, cam, 16, 16)
        assert s.occupancy.sum() == 0
        assert np.all(s.winner == -1)
        assert np.all(s.features.numpy() == DEFAULT_BACKGROUND)
        assert np.all(s.depth == 0.0)

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            splat(np.zeros((3, 3), dtype=np.float32), np.zeros((2, 4), dtype=np.float32),
                  CameraParams(), 8, 8)


def random_config(seed, n_max=50, size=16, channels=4):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, n_max + 1))
    verts = rng.uniform(-1.2, 1.2, size=(n, 3)).astype(np.float32)
    if rng.random() < 0.3:
        # engineered depth ties on a shared pixel
        k = min(n, 3)
        verts[:k, :2] = verts[0, :2]
        verts[:k, 2] = verts[0, 2]
    desc = rng.normal(size=(n, channels)).astype(np.float32)
    cam = CameraParams(float(rng.uniform(0.5, 2.0)), float(rng.uniform(-0.3, 0.3)),
                       float(rng.uniform(-0.3, 0.3)))
    return verts, desc, cam, size, size


class TestOracleEquivalence:
    def test_random_configs_match_oracle_bitwise(self):
        for seed in range(60):
            verts, desc, cam, w, h = random_config(seed)
            s = splat(verts, desc, cam, w, h)
            assert_bitwise(s, splat_oracle(verts, desc, cam, w, h))

    def test_oracle_processing_order_irrelevant(self):
        verts, desc, cam, w, h = random_config(123)
        rng = np.random.default_rng(9)
        base = splat_oracle(verts, desc, cam, w, h)
        for _ in range(5):
            perm = rng.permutation(len(verts))
            shuffled = splat_oracle(verts, desc, cam, w, h, order=list(perm))
            for a, b in zip(base, shuffled):
                assert np.array_equal(a, b)

    def test_input_permutation_invariance_with_distinct_depths(self):
        rng = np.random.default_rng(11)
        n = 80
        verts = rng.uniform(-1, 1, size=(n, 3)).astype(np.float32)
        verts[:, 2] = np.linspace(-0.5, 0.5, n)  # distinct depths
        desc = rng.normal(size=(n, 4)).astype(np.float32)
        cam = CameraParams()
        base = splat(verts, desc, cam, 16, 16)
        for _ in range(5):
            perm = rng.permutation(n)
            other = splat(verts[perm], desc[perm], cam, 16, 16)
            assert np.array_equal(base.features.numpy(), other.features.numpy())
            assert np.array_equal(base.depth, other.depth)
            assert np.array_equal(base.occupancy, other.occupancy)


class TestPlaneInvariants:
    def test_occupied_bounded_by_vertices_and_pixels(self):
        for seed in range(20):
            verts, desc, cam, w, h = random_config(seed, n_max=300)
            s = splat(verts, desc, cam, w, h)
            assert s.occupancy.sum() <= min(len(verts), w * h)

    def test_nonzero_background_fill(self):
        verts = np.zeros((1, 3), dtype=np.float32)
        desc = np.full((1, 2), 7.0, dtype=np.float32)
        s = splat(verts, desc, CameraParams(), 8, 8, background=-1.5)
        bg = ~s.occupancy
        assert np.all(s.features.numpy()[bg] == -1.5)
        assert np.all(s.depth[bg] == 0.0)

    def test_depth_normalized_to_unit_range(self):
        verts, desc, cam, w, h = random_config(77, n_max=200)
        s = splat(verts, desc, cam, w, h)
        if s.occupancy.sum() >= 2:
            occ_d = s.depth[s.occupancy]
            assert occ_d.min() == 0.0 and occ_d.max() == 1.0


class TestSplatGradient:
    def test_gradient_through_descriptors(self):
        rng = np.random.default_rng(5)
        verts = rng.uniform(-0.8, 0.8, size=(12, 3)).astype(np.float32)
        weight = rng.normal(size=(8, 8, 3)).astype(np.float64)
        cam = CameraParams()

        def run(desc):
            s = splat(verts, desc, cam, 8, 8)
            return nm.sum_(nm.mul(s.features, nm.Tensor(weight, dtype=desc.dtype)))

        rep = nm.grad_check(run, [nm.Tensor(rng.normal(size=(12, 3)).astype(np.float64), dtype=np.float64)])
        assert rep.passed, rep

    def test_culled_vertices_get_zero_gradient(self):
        verts = np.array([[0.0, 0.0, 0.1], [5.0, 0.0, 0.2]], dtype=np.float32)
        desc = nm.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        with nm.GradTape() as tape:
            tape.watch(desc)
            s = splat(verts, desc, CameraParams(), 8, 8)
            loss = nm.sum_(s.features)
            grads = nm.backward(loss, tape=tape)
        g = grads[desc.node_id].numpy()
        assert np.all(g[0] == 1.0)
        assert np.all(g[1] == 0.0)


class TestDebugViews:
    def test_view_shapes_and_dtype(self):
        verts, desc, cam, w, h = random_config(3)
        s = splat(verts, desc, cam, w, h)
        sv = splat_view(s)
        dv = depth_view(s)
        assert sv.shape == (h, w, 3) and sv.dtype == np.uint8
        assert dv.shape == (h, w) and dv.dtype == np.uint8
