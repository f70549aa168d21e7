import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hoirefine import geom
from hoirefine.geom import Camera, GeometryError, Mesh, SimilarityTransform


def rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


CAM = Camera(100.0, 100.0, 50.0, 50.0, 100, 100)


class TestMesh:
    def test_rejects_bad_index(self):
        with pytest.raises(GeometryError):
            Mesh(np.zeros((2, 3)), [[0, 2]])

    def test_rejects_duplicate_edges(self):
        with pytest.raises(GeometryError):
            Mesh(np.zeros((2, 3)), [[0, 1], [1, 0]])

    def test_faces_give_unique_edges(self):
        m = Mesh.from_faces(np.eye(3), [[0, 1, 2]])
        assert m.edges.tolist() == [[0, 1], [0, 2], [1, 2]]


class TestEdgeLengths:
    def test_unit_edge(self):
        assert geom.edge_lengths(Mesh([[0, 0, 0], [1, 0, 0]], [[0, 1]])).tolist() == [1.0]

    def test_degenerate_edge(self):
        assert geom.edge_lengths(Mesh([[1, 2, 3], [1, 2, 3]], [[0, 1]])).tolist() == [0.0]

    def test_equilateral(self):
        v = [[0, 0, 0], [2, 0, 0], [1, np.sqrt(3), 0]]
        np.testing.assert_allclose(geom.edge_lengths(Mesh.from_faces(v, [[0, 1, 2]])), [2, 2, 2])

    def test_no_edges(self):
        with pytest.raises(GeometryError, match="no edges"):
            geom.edge_lengths(Mesh([[0, 0, 0]]))


class TestProject:
    def test_optical_axis(self):
        np.testing.assert_array_equal(geom.project([[0, 0, 1]], CAM), [[50, 50]])

    def test_offset_point(self):
        np.testing.assert_array_equal(geom.project([[1, 0, 1]], CAM), [[150, 50]])

    def test_behind_camera(self):
        with pytest.raises(GeometryError, match="behind camera"):
            geom.project([[0, 0, -1]], CAM)

    def test_scale_consistency(self, rng):
        p = rng.uniform(-1, 1, size=(20, 3)) + [0, 0, 3]
        scaled = Camera(250.0, 250.0, 50.0, 50.0, 100, 100)
        np.testing.assert_allclose(geom.project(p * 2.5, CAM), geom.project(p, CAM))
        # scaling the focal alone scales offsets from the principal point
        np.testing.assert_allclose(geom.project(p, scaled) - 50, 2.5 * (geom.project(p, CAM) - 50))


class TestNearest:
    def test_identical(self, rng):
        a = rng.normal(size=(7, 3))
        assert np.all(geom.nn_dists(a, a) == 0)

    def test_single(self):
        assert geom.nn_dists([[0, 0, 0]], [[1, 0, 0], [3, 0, 0]]).tolist() == [1.0]

    def test_two(self):
        assert geom.nn_dists([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]).tolist() == [1.0, 1.0]

    def test_empty(self):
        with pytest.raises(GeometryError):
            geom.nn_dists(np.zeros((0, 3)), [[1, 0, 0]])


class TestChamfer:
    def test_identical(self, rng):
        a = rng.normal(size=(9, 3))
        assert geom.chamfer(a, a) == 0.0

    def test_hand_example(self):
        assert geom.chamfer([[0, 0, 0]], [[1, 0, 0], [3, 0, 0]]) == pytest.approx(150.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)),
                  elements=st.floats(-10, 10)),
           arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)),
                  elements=st.floats(-10, 10)))
    def test_symmetric_nonnegative(self, a, b):
        assert geom.chamfer(a, b) == geom.chamfer(b, a)
        assert geom.chamfer(a, b) >= 0


class TestProcrustes:
    def test_identity(self, rng):
        a = rng.normal(size=(10, 3))
        t = geom.procrustes(a, a)
        assert t.scale == pytest.approx(1.0)
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t.translation, 0, atol=1e-12)
        assert geom.alignment_residual(t, a, a) < 1e-20

    def test_known_similarity(self, rng):
        a = rng.normal(size=(12, 3))
        b = 2 * a @ rot_z(90).T + [1, 2, 3]
        t = geom.procrustes(a, b)
        assert geom.alignment_residual(t, a, b) < 1e-9
        assert t.scale == pytest.approx(2.0)
        np.testing.assert_allclose(t.rotation, rot_z(90), atol=1e-9)

    def test_degenerate(self):
        with pytest.raises(GeometryError, match="degenerate"):
            geom.procrustes([[0, 0, 0], [0, 0, 0], [1, 1, 1]], [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        with pytest.raises(GeometryError, match="degenerate"):
            geom.procrustes(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_no_reflection(self, rng):
        a = rng.normal(size=(10, 3))
        b = a * [1, 1, -1]  # mirror image
        t = geom.procrustes(a, b)
        assert np.linalg.det(t.rotation) == pytest.approx(1.0)

    def test_optimal_against_random_transforms(self, rng):
        for _ in range(5):
            a = rng.normal(size=(15, 3))
            b = rng.normal(size=(15, 3))
            best = geom.alignment_residual(geom.procrustes(a, b), a, b)
            assert best <= geom.alignment_residual(SimilarityTransform.identity(), a, b)
            for _ in range(100):
                cand = SimilarityTransform(float(rng.uniform(0.2, 3)), random_rotation(rng),
                                           rng.normal(size=3))
                assert best <= geom.alignment_residual(cand, a, b) + 1e-12


class TestApply:
    def test_identity(self, rng):
        p = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(geom.apply_similarity(SimilarityTransform.identity(), p), p)

    def test_scale(self):
        t = SimilarityTransform(2.0, np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(geom.apply_similarity(t, [[1, 1, 1]]), [[2, 2, 2]])

    def test_round_trip(self, rng):
        a = rng.normal(size=(8, 3))
        b = 0.7 * a @ random_rotation(rng).T + [0.1, -2, 5]
        np.testing.assert_allclose(geom.apply_similarity(geom.procrustes(a, b), a), b, atol=1e-9)

    def test_transform_invariants(self):
        with pytest.raises(GeometryError):
            SimilarityTransform(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(GeometryError):
            SimilarityTransform(0.0, np.eye(3), np.zeros(3))


def test_obj_round_trip(tmp_path, rng):
    faces = [[0, 1, 2], [0, 2, 3]]
    m = Mesh.from_faces(rng.normal(size=(4, 3)), faces)
    geom.write_obj(m, tmp_path / "a.obj")
    back = geom.read_obj(tmp_path / "a.obj")
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_array_equal(back.edges, m.edges)

    lines = Mesh(rng.normal(size=(3, 3)), [[0, 1], [1, 2]])
    geom.write_obj(lines, tmp_path / "b.obj")
    back = geom.read_obj(tmp_path / "b.obj")
    assert back.faces is None
    np.testing.assert_array_equal(back.edges, lines.edges)
