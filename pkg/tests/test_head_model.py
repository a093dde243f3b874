import numpy as np
import pytest
from scipy.sparse import csr_matrix

from conftest import rand_params
from cvthead import head_model as hm
from cvthead.errors import FormatError, ShapeError


def make_rig(verts, joint_anchor_rows, weights, parents):
    """Hand-built rig: joints regressed from dedicated anchor vertices."""
    verts = np.asarray(verts, dtype=np.float32)
    n = len(verts)
    nj = len(joint_anchor_rows)
    reg = np.zeros((nj, n), dtype=np.float32)
    for j, row in enumerate(joint_anchor_rows):
        reg[j, row] = 1.0
    chain = [csr_matrix(np.eye(n, dtype=np.float32))]
    return hm.HeadModel(
        template=verts,
        shape_basis=np.zeros((n, 3, 1), dtype=np.float32),
        expr_basis=np.zeros((n, 3, 1), dtype=np.float32),
        skin_weights=np.asarray(weights, dtype=np.float32),
        joint_regressor=csr_matrix(reg),
        kinematic_parents=np.asarray(parents, dtype=np.int32),
        faces=np.zeros((0, 3), dtype=np.int32),
        coarse_index=np.arange(n, dtype=np.int32),
        upsample_chain=chain,
    )


class TestBlendshapes:
    def test_zero_coefficients_give_template(self, small_model):
        m = small_model
        out = hm.apply_blendshapes(m, np.zeros(m.n_shape), np.zeros(m.n_expr))
        assert np.array_equal(out, m.template)

    def test_unit_vector_selects_basis_column(self, small_model):
        m = small_model
        e0 = np.zeros(m.n_shape, dtype=np.float32)
        e0[0] = 1.0
        out = hm.apply_blendshapes(m, e0, np.zeros(m.n_expr))
        np.testing.assert_allclose(out, m.template + m.shape_basis[:, :, 0], atol=1e-6)

    def test_random_matches_matvec_oracle(self, small_model):
        m = small_model
        rng = np.random.default_rng(1)
        beta = rng.normal(size=m.n_shape).astype(np.float32)
        phi = rng.normal(size=m.n_expr).astype(np.float32)
        got = hm.apply_blendshapes(m, beta, phi)
        want = m.template.astype(np.float64).copy()
        for l in range(m.n_shape):
            want += beta[l] * m.shape_basis[:, :, l]
        for k in range(m.n_expr):
            want += phi[k] * m.expr_basis[:, :, k]
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_length_mismatch(self, small_model):
        with pytest.raises(ShapeError):
            hm.apply_blendshapes(small_model, np.zeros(2), np.zeros(small_model.n_expr))


class TestLBS:
    def test_zero_pose_is_identity(self, small_model):
        m = small_model
        out = hm.apply_lbs(m, m.template, np.zeros(m.theta_len))
        np.testing.assert_allclose(out, m.template, atol=1e-6)

    def test_global_rotation_about_z(self):
        verts = [(1.0, 0.0, 0.0), (0.0, 0.0, 0.0)]
        rig = make_rig(verts, [1], [[1.0], [1.0]], [-1])
        theta = np.zeros(6, dtype=np.float32)
        theta[2] = np.pi / 2
        out = hm.apply_lbs(rig, rig.template, theta)
        np.testing.assert_allclose(out[0], [0.0, 1.0, 0.0], atol=1e-6)

    def test_joint_rotation_about_its_rest_position(self):
        # joint at origin, vertex at (1,0,0): rotating the joint 90deg about z
        # carries the vertex to (0,1,0)
        verts = [(1.0, 0.0, 0.0), (0.0, 0.0, 0.0)]
        rig = make_rig(verts, [1], [[1.0], [1.0]], [-1])
        theta = np.zeros(6, dtype=np.float32)
        theta[5] = np.pi / 2
        out = hm.apply_lbs(rig, rig.template, theta)
        np.testing.assert_allclose(out[0], [0.0, 1.0, 0.0], atol=1e-6)

    def test_half_half_weights_blend_to_midpoint(self):
        # two joints; rotating only the first must land the shared vertex at
        # the midpoint of the per-joint rigid images
        verts = [(0.0, 0.2, 0.0), (-0.5, 0.0, 0.0), (0.5, 0.0, 0.0)]
        weights = [[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]]
        rig = make_rig(verts, [1, 2], weights, [-1, -1])
        alpha = 0.7
        theta = np.zeros(9, dtype=np.float32)
        theta[5] = alpha  # joint 0 about z
        out = hm.apply_lbs(rig, rig.template, theta)

        v = np.array(verts[0])
        j0 = np.array(verts[1])
        rot = hm.rodrigues([0, 0, alpha])
        img0 = rot @ (v - j0) + j0
        img1 = v
        np.testing.assert_allclose(out[0], 0.5 * img0 + 0.5 * img1, atol=1e-6)

    def test_rigid_submotion_preserves_distances(self, synthetic_model):
        m = synthetic_model
        rigid = np.flatnonzero(m.skin_weights.max(axis=1) == 1.0)
        assert len(rigid) >= 4, "synthetic model should have rigidly bound eyeballs"
        joint = int(np.argmax(m.skin_weights[rigid[0]]))
        group = rigid[np.argmax(m.skin_weights[rigid], axis=1) == joint][:8]
        theta = np.zeros(m.theta_len, dtype=np.float32)
        theta[3:6] = (0.2, -0.1, 0.3)       # neck
        theta[3 + 3 * joint: 6 + 3 * joint] = (0.4, 0.2, -0.3)
        posed = hm.apply_lbs(m, m.template, theta)
        before = np.linalg.norm(m.template[group][:, None] - m.template[group][None], axis=2)
        after = np.linalg.norm(posed[group][:, None] - posed[group][None], axis=2)
        np.testing.assert_allclose(after, before, atol=1e-5)


def reconstruct_oracle(m, beta, phi, theta):
    """Independent one-shot evaluation using homogeneous 4x4 transforms."""
    n = m.n_vertices
    v = m.template.astype(np.float64).copy()
    v += np.einsum("nil,l->ni", m.shape_basis.astype(np.float64), np.asarray(beta, dtype=np.float64))
    v += np.einsum("nik,k->ni", m.expr_basis.astype(np.float64), np.asarray(phi, dtype=np.float64))
    joints = np.asarray(m.joint_regressor @ v)
    nj = m.n_joints

    def hom(r, t):
        g = np.eye(4)
        g[:3, :3] = r
        g[:3, 3] = t
        return g

    world = [None] * nj
    for j in range(nj):  # parents precede children in these models
        p = int(m.kinematic_parents[j])
        r = hm.rodrigues(theta[3 + 3 * j: 6 + 3 * j])
        local = hom(r, joints[j] - (joints[p] if p >= 0 else 0))
        world[j] = (world[p] @ local) if p >= 0 else local
    rel = [world[j] @ hom(np.eye(3), -joints[j]) for j in range(nj)]

    vh = np.concatenate([v, np.ones((n, 1))], axis=1)
    out = np.zeros((n, 3))
    for j in range(nj):
        out += m.skin_weights[:, j: j + 1].astype(np.float64) * (vh @ rel[j].T)[:, :3]
    return out @ hm.rodrigues(theta[:3]).T


class TestReconstruct:
    def test_zero_params_give_template(self, small_model):
        m = small_model
        out = hm.reconstruct(m, np.zeros(m.n_shape), np.zeros(m.n_expr), np.zeros(m.theta_len))
        np.testing.assert_allclose(out, m.template, atol=1e-6)

    def test_equals_composition_bitwise(self, small_model):
        m = small_model
        beta, phi, theta = rand_params(m, 3)
        a = hm.reconstruct(m, beta, phi, theta)
        b = hm.apply_lbs(m, hm.apply_blendshapes(m, beta, phi), theta)
        assert np.array_equal(a, b)

    def test_matches_monolithic_oracle(self, small_model):
        m = small_model
        beta, phi, theta = rand_params(m, 4)
        got = hm.reconstruct(m, beta, phi, theta)
        want = reconstruct_oracle(m, beta, phi, theta)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_affine_linearity_in_coefficients(self, small_model):
        m = small_model
        rng = np.random.default_rng(5)
        b1, b2 = rng.normal(size=(2, m.n_shape))
        phi = rng.normal(size=m.n_expr)
        theta = rng.normal(0, 0.4, m.theta_len)
        a, b = 0.6, -0.3
        lhs = hm.reconstruct(m, a * b1 + b * b2, phi, theta)
        rhs = (a * hm.reconstruct(m, b1, phi, theta)
               + b * hm.reconstruct(m, b2, phi, theta)
               - (a + b - 1) * hm.reconstruct(m, np.zeros(m.n_shape), phi, theta))
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


class TestDriveVertices:
    def test_no_offsets_equals_reconstruct(self, small_model):
        m = small_model
        beta, phi, theta = rand_params(m, 6)
        assert np.array_equal(
            hm.drive_vertices(m, beta, phi, theta),
            hm.reconstruct(m, beta, phi, theta))

    def test_self_reenactment_identity(self, small_model):
        m = small_model
        beta, phi, theta = rand_params(m, 7)
        zero_off = np.zeros((m.n_vertices, 3), dtype=np.float32)
        assert np.array_equal(
            hm.drive_vertices(m, beta, phi, theta, offsets=zero_off),
            hm.reconstruct(m, beta, phi, theta))

    def test_constant_offset_under_identity_pose(self, small_model):
        m = small_model
        off = np.tile(np.array([0.1, 0.0, 0.0], dtype=np.float32), (m.n_vertices, 1))
        out = hm.drive_vertices(m, np.zeros(m.n_shape), np.zeros(m.n_expr),
                                np.zeros(m.theta_len), offsets=off)
        np.testing.assert_allclose(out, m.template + off, atol=1e-6)

    def test_world_offsets_applied_after_pose(self, small_model):
        m = small_model
        beta, phi, theta = rand_params(m, 8)
        off = np.full((m.n_vertices, 3), 0.05, dtype=np.float32)
        world = hm.drive_vertices(m, beta, phi, theta, offsets=off, offset_space="world")
        np.testing.assert_allclose(world, hm.reconstruct(m, beta, phi, theta) + off, atol=1e-7)

    def test_bad_offsets_shape(self, small_model):
        m = small_model
        with pytest.raises(ShapeError):
            hm.drive_vertices(m, np.zeros(m.n_shape), np.zeros(m.n_expr),
                              np.zeros(m.theta_len), offsets=np.zeros((3, 3)))


class TestSyntheticModel:
    def test_same_seed_bitwise_identical(self):
        a = hm.generate_synthetic_model(seed=3, n_vertices=300, n_coarse=40,
                                        shape_dims=4, expr_dims=3)
        b = hm.generate_synthetic_model(seed=3, n_vertices=300, n_coarse=40,
                                        shape_dims=4, expr_dims=3)
        assert np.array_equal(a.template, b.template)
        assert np.array_equal(a.shape_basis, b.shape_basis)
        assert np.array_equal(a.skin_weights, b.skin_weights)
        assert np.array_equal(a.coarse_index, b.coarse_index)
        assert (a.upsample_chain[0] != b.upsample_chain[0]).nnz == 0
        assert (a.upsample_chain[1] != b.upsample_chain[1]).nnz == 0

    def test_skin_weight_rows_sum_to_one(self, synthetic_model):
        sums = synthetic_model.skin_weights.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert synthetic_model.skin_weights.min() >= 0

    def test_paper_scale_shapes(self, synthetic_model):
        m = synthetic_model
        assert m.n_vertices == 5023
        assert m.n_coarse == 314
        assert m.shape_basis.shape == (5023, 3, 20)
        assert m.expr_basis.shape == (5023, 3, 10)
        assert m.skin_weights.shape == (5023, 4)
        assert m.theta_len == 15

    def test_upsample_chain_is_row_stochastic(self, synthetic_model):
        for m in synthetic_model.upsample_chain:
            sums = np.asarray(m.sum(axis=1)).reshape(-1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-5)
            assert m.tocoo().data.min() >= 0


class TestModelIO:
    def test_round_trip_bitwise(self, small_model, tmp_path):
        path = tmp_path / "model.cvth"
        hm.save_model(small_model, path)
        back = hm.load_model(path)
        assert np.array_equal(back.template, small_model.template)
        assert np.array_equal(back.shape_basis, small_model.shape_basis)
        assert np.array_equal(back.skin_weights, small_model.skin_weights)
        assert np.array_equal(back.faces, small_model.faces)
        assert np.array_equal(back.coarse_index, small_model.coarse_index)
        for a, b in zip(back.upsample_chain, small_model.upsample_chain):
            assert (a != b).nnz == 0
        assert (back.joint_regressor != small_model.joint_regressor).nnz == 0

    def test_truncated_file_is_rejected(self, small_model, tmp_path):
        path = tmp_path / "model.cvth"
        hm.save_model(small_model, path)
        raw = path.read_bytes()
        cut = tmp_path / "cut.cvth"
        cut.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            hm.load_model(cut)

    def test_corrupt_skin_weights_rejected(self, small_model, tmp_path):
        bad = hm.HeadModel(
            template=small_model.template,
            shape_basis=small_model.shape_basis,
            expr_basis=small_model.expr_basis,
            skin_weights=small_model.skin_weights * 0.5,
            joint_regressor=small_model.joint_regressor,
            kinematic_parents=small_model.kinematic_parents,
            faces=small_model.faces,
            coarse_index=small_model.coarse_index,
            upsample_chain=small_model.upsample_chain,
        )
        path = tmp_path / "bad.cvth"
        hm.save_model(bad, path)
        with pytest.raises(FormatError, match="skin_weights"):
            hm.load_model(path)


class TestParamsJSON:
    def test_round_trip(self, small_model):
        p = hm.neutral_params(small_model)
        p.beta[0] = 0.25
        p.theta[5] = -0.5
        back = hm.AvatarParams.from_json(p.to_json())
        assert np.array_equal(back.beta, p.beta)
        assert np.array_equal(back.theta, p.theta)
        assert back.camera == p.camera
        assert back.offsets is None

    def test_offsets_survive(self, small_model):
        p = hm.neutral_params(small_model)
        p.offsets = np.zeros((small_model.n_vertices, 3), dtype=np.float32)
        p.offsets[0, 0] = 0.125
        back = hm.AvatarParams.from_json(p.to_json())
        assert np.array_equal(back.offsets, p.offsets)

    def test_validate_names_bad_field(self, small_model):
        p = hm.neutral_params(small_model)
        p.beta = np.zeros(3, dtype=np.float32)
        with pytest.raises(ShapeError, match="beta"):
            hm.validate_params(small_model, p)
