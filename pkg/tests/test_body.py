import numpy as np
import pytest

from bodynerf import body


@pytest.fixture(scope="module")
def template():
    return body.build_template(body.BodyParams(), level=2)


class TestTemplate:
    def test_default_vertex_count_864(self, template):
        # tessellation formula: 16 capsules x ((6*2+1)*2*2 + 2) vertices
        per_capsule = body.capsule_vertex_count(2)
        assert per_capsule == 54
        assert len(template.vertices) == 16 * per_capsule == 864

    def test_uniform_scaling(self, template):
        scaled = body.build_template(body.BodyParams(beta=np.full(10, 1.1)))
        assert np.allclose(scaled.vertices, 1.1 * template.vertices, atol=1e-12)
        assert body.watertight_violations(scaled.faces) == 0

    def test_out_of_range_shape_rejected(self):
        beta = np.ones(10)
        beta[3] = 0.4
        with pytest.raises(ValueError):
            body.build_template(body.BodyParams(beta=beta))

    def test_watertight(self, template):
        assert body.watertight_violations(template.faces) == 0

    def test_normals_unit(self, template):
        assert np.abs(np.linalg.norm(template.normals, axis=1) - 1.0).max() < 1e-9

    def test_skin_weights_convex(self, template):
        w = template.skin_weights
        assert np.all(w >= 0.0)
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-9

    def test_deterministic(self):
        a = body.build_template(body.BodyParams())
        b = body.build_template(body.BodyParams())
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)

    def test_capsule_normals_match_analytic(self):
        """Recomputed area-weighted normals vs analytic capsule normals."""
        a = np.array([0.0, 0.0, 0.0])
        b = np.array([0.0, 0.0, 0.3])
        r = 0.05
        verts, faces = body.capsule_mesh(a, b, r, level=2)
        n = body.vertex_normals(verts, faces)
        analytic = np.empty_like(verts)
        for i, p in enumerate(verts):
            t = np.clip(p[2], 0.0, 0.3)
            d = p - np.array([0.0, 0.0, t])
            analytic[i] = d / np.linalg.norm(d)
        angles = np.degrees(np.arccos(np.clip((n * analytic).sum(axis=1), -1, 1)))
        assert angles.max() < 5.0


class TestPosing:
    def test_identity_pose_exact(self, template):
        posed = body.pose_mesh(template, np.zeros((16, 3)))
        assert np.array_equal(posed.vertices, template.vertices)

    def test_rigid_root_rotation(self, template):
        theta = np.zeros((16, 3))
        theta[0] = [0.3, -0.2, 0.9]
        posed = body.pose_mesh(template, theta)
        r = body.rotation_from_axis_angle(theta[0])
        assert np.abs(posed.vertices - template.vertices @ r.T).max() < 1e-12
        # pairwise distances preserved
        idx = np.arange(0, 864, 57)
        d0 = np.linalg.norm(template.vertices[idx, None] - template.vertices[None, idx], axis=-1)
        d1 = np.linalg.norm(posed.vertices[idx, None] - posed.vertices[None, idx], axis=-1)
        assert np.abs(d0 - d1).max() < 1e-9

    def test_elbow_closed_form(self, template):
        """One-hot forearm weights: the elbow chain matches the rigid
        forward-kinematics oracle."""
        joint = 5  # left forearm
        theta = np.zeros((16, 3))
        theta[joint] = [0.0, 0.0, np.pi / 2]
        posed = body.pose_mesh(template, theta)
        moved = np.isin(template.part_ids, [5, 6])  # forearm + hand
        c = template.joints[joint]
        r = body.rotation_from_axis_angle(theta[joint])
        expect = (template.vertices[moved] - c) @ r.T + c
        assert np.abs(posed.vertices[moved] - expect).max() < 1e-12
        assert np.array_equal(posed.vertices[~moved], template.vertices[~moved])

    def test_pose_magnitude_rejected(self, template):
        theta = np.zeros((16, 3))
        theta[2] = [0.0, 0.0, 3.3]
        with pytest.raises(ValueError):
            body.pose_mesh(template, theta)

    def test_posed_bbox_finite_contains_vertices(self, template):
        rng = np.random.default_rng(3)
        theta = rng.uniform(-0.4, 0.4, size=(16, 3))
        posed = body.pose_mesh(template, theta)
        lo, hi = posed.bounds()
        assert np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))
        assert np.all(posed.vertices >= lo - 1e-12)
        assert np.all(posed.vertices <= hi + 1e-12)

    def test_pose_deterministic(self, template):
        theta = np.random.default_rng(1).uniform(-0.3, 0.3, size=(16, 3))
        a = body.pose_mesh(template, theta)
        b = body.pose_mesh(template, theta)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.normals, b.normals)

    def test_soft_weights_blend(self, template):
        """General convex weights interpolate the per-joint rigid motions."""
        mesh = body.build_template(body.BodyParams())
        mesh.skin_weights = np.zeros_like(mesh.skin_weights)
        mesh.skin_weights[:, 0] = 0.25
        mesh.skin_weights[:, 1] = 0.75
        theta = np.zeros((16, 3))
        theta[0] = [0.0, 0.0, 0.4]
        theta[1] = [0.2, 0.0, 0.0]
        posed = body.pose_mesh(mesh, theta)
        mats, trans = body.joint_transforms(mesh.joints, theta)
        expect = 0.25 * (mesh.vertices @ mats[0].T + trans[0]) + \
            0.75 * (mesh.vertices @ mats[1].T + trans[1])
        assert np.abs(posed.vertices - expect).max() < 1e-12

    def test_dilated_aabb(self, template):
        lo, hi = body.dilated_aabb(template, margin=0.1)
        tlo, thi = template.bounds()
        assert np.allclose(lo, tlo - 0.1)
        assert np.allclose(hi, thi + 0.1)
