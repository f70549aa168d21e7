import numpy as np
import pytest

from hoirefine import body
from hoirefine.body import BodyParams, BodyTemplate, ObjectPose, ObjectTemplate
from hoirefine.geom import Mesh, pairwise_dists


@pytest.fixture(scope="module")
def tpl():
    return body.default_body_template()


def rz(a):
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


def test_template_invariants(tpl):
    tpl.validate()
    assert tpl.num_joints == 8
    assert 180 <= tpl.num_vertices <= 260
    np.testing.assert_allclose(tpl.regressor @ tpl.vertices, tpl.joints, atol=1e-9)


def test_rodrigues_quarter_turn():
    r = body.rodrigues([0, 0, np.pi / 2])
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    np.testing.assert_array_equal(body.rodrigues(np.zeros(3)), np.eye(3))


def test_rest_pose(tpl):
    m = body.lbs_forward(tpl, BodyParams.zeros(8))
    np.testing.assert_allclose(m.vertices, tpl.vertices, atol=1e-12)
    np.testing.assert_array_equal(m.faces, tpl.faces)


def test_root_rotation_is_rigid(tpl, rng):
    rot = np.zeros((8, 3))
    rot[0] = [0, 0, np.pi / 2]
    t = np.array([0.3, -0.2, 3.0])
    m = body.lbs_forward(tpl, BodyParams(rot, t))
    np.testing.assert_allclose(m.vertices, tpl.vertices @ rz(np.pi / 2).T + t, atol=1e-12)


def test_random_root_motion_equivariance(tpl, rng):
    pose = rng.uniform(-0.5, 0.5, size=(8, 3))
    base = body.lbs_forward(tpl, BodyParams(pose, np.zeros(3))).vertices
    rv = rng.normal(size=3)
    pose2 = pose.copy()
    # composing a root rotation: R_new = R_g @ R_root
    rg = body.rodrigues(rv)
    r0 = rg @ body.rodrigues(pose[0])
    ang = np.arccos(np.clip((np.trace(r0) - 1) / 2, -1, 1))
    axis = np.array([r0[2, 1] - r0[1, 2], r0[0, 2] - r0[2, 0], r0[1, 0] - r0[0, 1]]) / (2 * np.sin(ang))
    pose2[0] = axis * ang
    moved = body.lbs_forward(tpl, BodyParams(pose2, [1, 2, 3])).vertices
    np.testing.assert_allclose(moved, base @ rg.T + [1, 2, 3], atol=1e-9)


def test_two_joint_chain_by_hand():
    verts = np.array([[2.0, 0, 0]])
    tpl = BodyTemplate(verts, np.zeros((0, 3), dtype=np.int64), (-1, 0),
                       np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[0.0, 1.0]]),
                       np.array([[1.0], [1.0]]))
    pose = np.array([[0, 0, 0], [0, 0, np.pi / 2]])
    out = body.lbs_forward(tpl, BodyParams(pose, np.zeros(3))).vertices
    # child rotation about (1,0,0) maps the offset (1,0,0) to (0,1,0)
    np.testing.assert_allclose(out, [[1.0, 1.0, 0.0]], atol=1e-12)
    # a root bend carries the child along: Rz(90) twice
    pose = np.array([[0, 0, np.pi / 2], [0, 0, np.pi / 2]])
    out = body.lbs_forward(tpl, BodyParams(pose, np.zeros(3))).vertices
    np.testing.assert_allclose(out, [[-1.0, 1.0, 0.0]], atol=1e-12)


def test_dimension_mismatch(tpl):
    with pytest.raises(body.BodyModelError):
        body.lbs_forward(tpl, BodyParams.zeros(5))


def test_object_forward():
    tpl = body.object_template(1)
    m0 = body.object_forward(tpl, ObjectPose(np.zeros(3), np.zeros(3)))
    np.testing.assert_array_equal(m0.vertices, tpl.mesh.vertices)
    m1 = body.object_forward(tpl, ObjectPose(np.zeros(3), [0, 0, 1]))
    np.testing.assert_allclose(m1.vertices - tpl.mesh.vertices, np.tile([0, 0, 1.0], (64, 1)))
    unit = ObjectTemplate(9, "pt", Mesh([[1.0, 0, 0]]))
    out = body.object_forward(unit, ObjectPose([0, 0, np.pi / 2], np.zeros(3)))
    np.testing.assert_allclose(out.vertices, [[0, 1, 0]], atol=1e-12)


def test_object_rigidity(rng):
    for tpl in body.default_object_templates():
        assert tpl.mesh.num_vertices == 64
        m = body.object_forward(tpl, ObjectPose(rng.normal(size=3), rng.normal(size=3)))
        np.testing.assert_allclose(pairwise_dists(m.vertices, m.vertices),
                                   pairwise_dists(tpl.mesh.vertices, tpl.mesh.vertices), atol=1e-9)


def test_unknown_category():
    with pytest.raises(body.BodyModelError):
        body.object_template(99)


class TestDownsample:
    def test_identity(self, tpl):
        m, idx = body.downsample(tpl.rest_mesh(), tpl.num_vertices)
        np.testing.assert_array_equal(idx, np.arange(tpl.num_vertices))

    def test_single(self, tpl):
        m, idx = body.downsample(tpl.rest_mesh(), 1)
        assert idx.tolist() == [0]
        assert len(m.edges) == 0

    def test_collinear(self):
        line = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], [[0, 1], [1, 2], [2, 3]])
        m, idx = body.downsample(line, 2)
        assert idx.tolist() == [0, 3]
        assert len(m.edges) == 0  # three hops apart

    def test_two_hop_edges(self):
        line = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0]],
                    [[0, 1], [1, 2], [2, 3], [3, 4]])
        m, idx = body.downsample(line, 3)
        assert idx.tolist() == [0, 2, 4]
        assert m.edges.tolist() == [[0, 1], [1, 2]]

    def test_out_of_range(self, tpl):
        with pytest.raises(body.BodyModelError):
            body.downsample(tpl.rest_mesh(), 0)
        with pytest.raises(body.BodyModelError):
            body.downsample(tpl.rest_mesh(), tpl.num_vertices + 1)

    def test_deterministic(self, tpl):
        a = body.downsample(tpl.rest_mesh(), 108)[1]
        b = body.downsample(tpl.rest_mesh(), 108)[1]
        np.testing.assert_array_equal(a, b)
        assert len(a) == 108


def test_template_serialisation(tmp_path, tpl):
    body.save_body_template(tpl, tmp_path / "t")
    back = body.load_body_template(tmp_path / "t")
    np.testing.assert_array_equal(back.vertices, tpl.vertices)
    np.testing.assert_array_equal(back.weights, tpl.weights)
    assert back.parents == tpl.parents
