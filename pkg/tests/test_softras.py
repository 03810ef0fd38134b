import warnings

import numpy as np
import pytest

from mpk import softras as S
from mpk.errors import DegenerateTriangleWarning, ShapeMismatch, VisibilityOutOfRange
from mpk.mesh import build_topology
from mpk.synth import generate_scene

BIG = np.array([[2.0, 2.0], [40.0, 4.0], [10.0, 36.0]])


def one_face():
    return build_topology([(0, 1, 2)], 3, [(0, 0), (1, 0), (0, 1)], np.zeros((3, 3)))


def test_face_influence_limits():
    assert S.face_influence(BIG, (15, 12), sigma=0.01) == pytest.approx(1.0)
    assert S.face_influence(BIG, (21, 3), sigma=1.0) == pytest.approx(0.5)
    assert S.face_influence(BIG, (100, 100), sigma=1.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        S.face_influence(BIG, (0, 0), sigma=0)


def test_face_influence_degenerate():
    flat = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    with pytest.warns(DegenerateTriangleWarning):
        assert S.face_influence(flat, (1, 1)) == 0.0


def test_zero_visibility_renders_zero():
    t = one_face()
    img = S.render_soft_silhouette(BIG, np.zeros(3), t, (48, 48), min_influence=0.0).image
    assert np.all(img == 0)


def test_large_triangle_matches_hard_away_from_edges():
    t = one_face()
    img = S.render_soft_silhouette(BIG, np.ones(3), t, (48, 48), sigma=0.05).image
    hard = S.hard_rasterize(BIG, t.faces, (48, 48))
    rr, cc = np.mgrid[0:48, 0:48]
    P = np.column_stack([cc.ravel(), rr.ravel()]).astype(float)
    d = np.min([_seg_dist(P, BIG[i], BIG[(i + 1) % 3]) for i in range(3)], axis=0).reshape(48, 48)
    far = d >= 2.0
    assert np.abs(img - hard)[far].mean() <= 1e-3
    assert np.abs(img - hard)[far].max() <= 1e-3


def _seg_dist(P, a, b):
    e = b - a
    t = np.clip((P - a) @ e / (e @ e), 0, 1)
    return np.linalg.norm(P - (a + t[:, None] * e), axis=1)


def test_render_bounds_and_validation():
    rng = np.random.default_rng(0)
    t = one_face()
    for _ in range(20):
        v = rng.uniform(-5, 20, (3, 2))
        img = S.render_soft_silhouette(v, rng.uniform(size=3), t, (16, 16), rng.uniform(0.1, 5)).image
        assert np.all((img >= 0) & (img <= 1))
    with pytest.raises(VisibilityOutOfRange):
        S.render_soft_silhouette(BIG, np.full(3, 1.2), t, (8, 8))
    with pytest.raises(ShapeMismatch):
        S.render_soft_silhouette(BIG[:2], np.ones(3), t, (8, 8))


def test_degenerate_faces_flagged():
    t = one_face()
    flat = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sil = S.render_soft_silhouette(flat, np.ones(3), t, (4, 4))
    assert sil.degenerate_faces == (0,)
    assert np.all(sil.image == 0)


@pytest.mark.skipif("cython" not in S.available_backends(), reason="compiled kernel not built")
@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    sc = generate_scene(seed, {"H": 32, "W": 32, "margin": 3})
    rng = np.random.default_rng(seed)
    v = sc.gt_vertices_px[:, :2] + rng.normal(0, 0.5, (sc.topology.vertex_count, 2))
    w = rng.uniform(size=sc.topology.vertex_count)
    grid, origin = (48, 48), (-8.0, -8.0)
    G = rng.normal(size=grid)
    out = {}
    for be in ("python", "cython"):
        img = S.render_soft_silhouette(v, w, sc.topology, grid, 1.3, origin, backend=be).image
        gv, gw = S.render_soft_silhouette_vjp(v, w, sc.topology, grid, G, 1.3, origin, backend=be)
        out[be] = (img, gv, gw)
    for a, b in zip(out["python"], out["cython"]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        S.render_soft_silhouette(BIG, np.ones(3), one_face(), (4, 4), backend="gpu")


def test_min_influence_cull_bound():
    sc = generate_scene(3, {"H": 32, "W": 32, "margin": 3})
    v, w = sc.gt_vertices_px[:, :2], np.full(sc.topology.vertex_count, 0.8)
    exact = S.render_soft_silhouette(v, w, sc.topology, sc.crop, 1.0, min_influence=0.0).image
    culled = S.render_soft_silhouette(v, w, sc.topology, sc.crop, 1.0, min_influence=1e-6).image
    # each skipped face changes the product by at most its influence
    assert np.abs(exact - culled).max() <= 1e-6 * sc.topology.face_count


def test_distance_field_examples():
    assert np.all(S.distance_field(np.zeros((4, 5))).values == 0)
    m = np.zeros((5, 5), bool)
    m[2, 3] = True
    df = S.distance_field(m).values
    assert df[2, 3] == 1.0 and df.sum() == 1.0
    sq = np.zeros((9, 9), bool)
    sq[2:7, 2:7] = True
    df = S.distance_field(sq).values
    assert df[4, 4] == 3.0
    assert df[2, 4] == 1.0 and df[3, 4] == 2.0
    assert np.all(df[~sq] == 0) and np.all(df[sq] > 0)


def test_distance_field_touching_border():
    m = np.ones((4, 4), bool)
    df = S.distance_field(m).values
    assert df[0, 0] == 1.0 and df[1, 1] == 2.0


def test_silhouette_loss_examples():
    m = np.zeros((6, 6), bool)
    m[1:5, 2:5] = True
    df = S.distance_field(m)
    sl = S.silhouette_loss(m.astype(float), m, df)
    assert sl.l2.value == 0.0
    assert sl.boundary.value == pytest.approx(-df.values[m].sum())
    assert S.silhouette_loss(np.zeros((6, 6)), m, df).boundary.value == 0.0
    g = sl.boundary.grads["silhouette"]
    assert np.all(g[m] < 0) and np.all(g[~m] == 0)
    with pytest.raises(ShapeMismatch):
        S.silhouette_loss(np.zeros((5, 6)), m, df)


def test_padded_grid():
    gh, gw, origin = S.padded_grid(64, 32)
    assert (gh, gw, origin) == (128, 64, (-16.0, -32.0))
    m = np.ones((4, 6))
    assert S.pad_mask(m).shape == (8, 12)
