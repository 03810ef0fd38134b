import itertools

import numpy as np
import pytest

from mpk.errors import (AtlasLengthMismatch, DegenerateFace, DisconnectedVertices, EmptyTopology,
                        FormatError, IndexOutOfRange, InvalidBarycentric, ShapeMismatch)
from mpk.mesh import (BarycentricCoord, Landmarker, build_topology, closest_point_on_triangle,
                      geodesic_distance, interpolate_on_face, landmark_joints, load_template,
                      read_mesh, uv_to_barycentric, write_mesh, build_biped_template, ROOT_JOINT)

UV3 = [(0, 0), (1, 0), (0, 1)]


def tri_mesh():
    return build_topology([(0, 1, 2)], 3, UV3, np.zeros((3, 3)))


def test_single_triangle():
    t = tri_mesh()
    assert len(t.edges) == 3
    assert t.face_adjacency == ((0,), (0,), (0,))


def test_two_triangles_share_edge():
    t = build_topology([(0, 1, 2), (1, 3, 2)], 4, [(0, 0), (1, 0), (0, 1), (1, 1)], np.zeros((4, 3)))
    assert len(t.edges) == 5
    assert {tuple(e) for e in t.edges} == {(0, 1), (1, 2), (0, 2), (1, 3), (2, 3)}


def test_build_errors():
    with pytest.raises(DegenerateFace):
        build_topology([(0, 0, 1)], 3, UV3, np.zeros((3, 3)))
    with pytest.raises(IndexOutOfRange):
        build_topology([(0, 1, 3)], 3, UV3, np.zeros((3, 3)))
    with pytest.raises(AtlasLengthMismatch):
        build_topology([(0, 1, 2)], 3, UV3[:2], np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        build_topology([(0, 1, 2)], 3, UV3, np.zeros((2, 3)))


def test_interpolate_examples():
    t = tri_mesh()
    attr = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    np.testing.assert_allclose(interpolate_on_face(t, BarycentricCoord(0, (1, 0, 0)), attr), [0, 0])
    np.testing.assert_allclose(interpolate_on_face(t, BarycentricCoord(0, (1 / 3, 1 / 3, 1 / 3)), attr), [1, 1])
    uv = interpolate_on_face(t, BarycentricCoord(0, (0.25, 0.5, 0.25)), t.uv_atlas)
    np.testing.assert_allclose(uv, [0.5, 0.25])


def test_interpolate_linear():
    rng = np.random.default_rng(0)
    t = tri_mesh()
    bc = BarycentricCoord(0, tuple(rng.dirichlet(np.ones(3))))
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(interpolate_on_face(t, bc, a + b),
                               interpolate_on_face(t, bc, a) + interpolate_on_face(t, bc, b), atol=1e-15)


def test_barycentric_validation():
    with pytest.raises(InvalidBarycentric):
        BarycentricCoord(0, (0.5, 0.6, -0.1))
    with pytest.raises(InvalidBarycentric):
        BarycentricCoord(0, (0.5, 0.5))
    with pytest.raises(InvalidBarycentric):
        interpolate_on_face(tri_mesh(), BarycentricCoord(3, (1, 0, 0)), np.zeros((3, 2)))


def test_uv_to_barycentric_vertex_and_centroid():
    topo, _ = load_template()
    k = 7
    bc = uv_to_barycentric(topo, topo.uv_atlas[k])
    idx = list(topo.faces[bc.face])
    assert bc.weights[idx.index(k)] == pytest.approx(1.0, abs=1e-9)
    f = 11
    c = topo.uv_atlas[topo.faces[f]].mean(axis=0)
    bc = uv_to_barycentric(topo, c)
    assert bc.face == f and not bc.flagged
    np.testing.assert_allclose(bc.weights, [1 / 3] * 3, atol=1e-9)


def _brute_nearest_uv(topo, u, samples=200):
    best = np.inf
    for tri in topo.uv_atlas[topo.faces]:
        # dense barycentric lattice including the boundary
        for i in range(samples + 1):
            for j in range(samples + 1 - i):
                w = np.array([i, j, samples - i - j]) / samples
                best = min(best, np.linalg.norm(w @ tri - u))
    return best


def test_uv_outside_snaps_and_flags():
    t = build_topology([(0, 1, 2), (1, 3, 2)], 4, [(0.2, 0.2), (0.6, 0.2), (0.2, 0.6), (0.6, 0.6)],
                       np.zeros((4, 3)))
    u = np.array([0.9, 0.35])
    bc = uv_to_barycentric(t, u)
    assert bc.flagged
    d = np.linalg.norm(interpolate_on_face(t, bc, t.uv_atlas) - u)
    assert d == pytest.approx(_brute_nearest_uv(t, u, 60), abs=2e-3)
    assert d <= _brute_nearest_uv(t, u, 60) + 1e-12


def test_uv_round_trip_interior():
    topo, _ = load_template()
    rng = np.random.default_rng(1)
    for _ in range(50):
        f = int(rng.integers(topo.face_count))
        w = rng.dirichlet(np.ones(3)) * 0.98 + 0.02 / 3
        bc = BarycentricCoord(f, tuple(w))
        back = uv_to_barycentric(topo, interpolate_on_face(topo, bc, topo.uv_atlas))
        assert back.face == f
        np.testing.assert_allclose(back.weights, w, atol=1e-9)


def test_uv_empty_topology():
    t = build_topology(np.zeros((0, 3), int), 0, np.zeros((0, 2)), np.zeros((0, 3)))
    with pytest.raises(EmptyTopology):
        uv_to_barycentric(t, (0.5, 0.5))


def test_closest_point_on_triangle():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    np.testing.assert_allclose(closest_point_on_triangle(np.array([0.2, 0.2, 5.0]), a, b, c), [0.6, 0.2, 0.2])
    np.testing.assert_allclose(closest_point_on_triangle(np.array([2.0, -1.0, 0.0]), a, b, c), [0, 1, 0])


def test_geodesic_examples():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 5, 0]])
    t = build_topology([(0, 1, 3), (1, 2, 3)], 4, np.full((4, 2), 0.5), pos)
    assert geodesic_distance(t, pos, 2, 2) == 0.0
    assert geodesic_distance(t, pos, 0, 2) == pytest.approx(2.0)
    with pytest.raises(IndexOutOfRange):
        geodesic_distance(t, pos, 0, 9)


def test_geodesic_disconnected():
    pos = np.arange(18, dtype=float).reshape(6, 3)
    t = build_topology([(0, 1, 2), (3, 4, 5)], 6, np.full((6, 2), 0.5), pos)
    with pytest.raises(DisconnectedVertices):
        geodesic_distance(t, pos, 0, 4)


def test_geodesic_symmetric_and_triangle_inequality():
    topo, _ = load_template()
    G = topo.geodesics
    assert topo.vertex_count <= 60
    np.testing.assert_allclose(G, G.T)
    V = topo.vertex_count
    for k in range(V):
        assert np.all(G <= G[:, [k]] + G[[k], :] + 1e-12)
    rng = np.random.default_rng(2)
    for a, b in rng.integers(V, size=(10, 2)):
        assert geodesic_distance(topo, topo.rest_positions, a, b) == pytest.approx(G[a, b])


def test_landmark_examples():
    pos = np.array([[0.0, 0, 0], [2, 0, 0], [5, 5, 5]])
    lm = Landmarker(np.array([[0, 0, 1.0], [0.5, 0.5, 0]]))
    np.testing.assert_allclose(landmark_joints(pos, lm), [[5, 5, 5], [1, 0, 0]])
    assert landmark_joints(pos, Landmarker(np.zeros((0, 3)))).shape == (0, 3)
    with pytest.raises(ShapeMismatch):
        landmark_joints(pos[:2], lm)
    with pytest.raises(ValueError):
        Landmarker(np.array([[0.5, 0.4, 0]]))


def test_template_shape():
    topo, lm = load_template()
    assert topo.vertex_count == 55 and topo.face_count == 64 and lm.joint_count == 14
    assert np.all((topo.uv_atlas >= 0) & (topo.uv_atlas <= 1))
    assert 0 <= ROOT_JOINT < lm.joint_count
    # the shipped file matches the generator
    t2, lm2 = build_biped_template()
    np.testing.assert_allclose(t2.rest_positions, topo.rest_positions)
    np.testing.assert_array_equal(t2.faces, topo.faces)
    np.testing.assert_allclose(lm2.matrix, lm.matrix)


def test_template_front_faces_point_at_camera():
    topo, _ = load_template()
    p = topo.rest_positions[topo.faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    # a relief surface: every face is visible in the rest pose
    assert np.all(n[:, 2] < 0)


def test_uv_atlas_non_overlapping():
    topo, _ = load_template()
    tri = topo.uv_atlas[topo.faces]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    assert np.all(area > 0)
    # interior sample points of each triangle lie in no other triangle
    for f, j in itertools.product(range(topo.face_count), range(3)):
        w = np.full(3, 0.2)
        w[j] = 0.6
        bc = uv_to_barycentric(topo, w @ tri[f])
        assert bc.face == f


def test_mesh_file_round_trip(tmp_path):
    topo, lm = load_template()
    p = tmp_path / "m.mesh"
    write_mesh(p, topo, lm)
    t2, lm2 = read_mesh(p)
    np.testing.assert_array_equal(t2.faces, topo.faces)
    np.testing.assert_array_equal(t2.rest_positions, topo.rest_positions)
    np.testing.assert_array_equal(t2.uv_atlas, topo.uv_atlas)
    np.testing.assert_array_equal(lm2.matrix, lm.matrix)
    assert lm2.names == lm.names


def test_mesh_file_errors(tmp_path):
    p = tmp_path / "bad.mesh"
    p.write_text("v 0 0 0 0 0\nx 1 2 3\n")
    with pytest.raises(FormatError):
        read_mesh(p)
    p.write_text("v 0 0 0 0 0\nv 1 0 0 1 0\nv 0 1 0 0 1\nf 0 1 2\nlm 0 1 0\n")
    with pytest.raises(FormatError):
        read_mesh(p)
