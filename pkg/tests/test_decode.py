import numpy as np
import pytest

from mpk.decode import (HeatmapStack, RegressionHead, UVStrategy, argsoftmax1d, argsoftmax2d,
                        best_face, bin_positions, decode_regression, decode_uv, fuse_predictions,
                        fuse_vjp, localize_vertices, pixel_posterior)
from mpk.errors import EmptyTopology, NonFiniteInput, ShapeMismatch, VisibilityOutOfRange
from mpk.mesh import build_topology, load_template


def test_argsoftmax_delta():
    h = np.zeros((8, 6))
    h[5, 3] = 20.0
    np.testing.assert_allclose(argsoftmax2d(h), [3, 5], atol=1e-6)


def test_argsoftmax_uniform_is_centroid():
    np.testing.assert_allclose(argsoftmax2d(np.zeros((7, 10))), [4.5, 3.0])


def test_argsoftmax_hand_2x2():
    h = np.array([[0.0, 0.0], [0.0, np.log(3.0)]])
    np.testing.assert_allclose(argsoftmax2d(h), [2 / 3, 2 / 3], atol=1e-12)


def test_argsoftmax_overflow_safe():
    h = np.zeros((4, 4))
    h[1, 2] = 1e6
    np.testing.assert_allclose(argsoftmax2d(h), [2, 1])


def test_argsoftmax_errors():
    with pytest.raises(NonFiniteInput):
        argsoftmax2d(np.array([[0.0, np.nan]]))
    with pytest.raises(ShapeMismatch):
        argsoftmax2d(np.zeros(3))
    with pytest.raises(ValueError):
        HeatmapStack(np.zeros((2, 2, 2)), alpha=0.0)


def test_argsoftmax_large_alpha_converges_to_argmax():
    rng = np.random.default_rng(0)
    for _ in range(10):
        h = rng.uniform(0, 0.5, (12, 12))
        r, c = rng.integers(12, size=2)
        h[r, c] = 1.0
        np.testing.assert_allclose(argsoftmax2d(h, alpha=50.0), [c, r], atol=1e-3)


def test_localize_matches_per_channel():
    rng = np.random.default_rng(1)
    S = rng.normal(size=(5, 7, 4))
    xy, p = localize_vertices(S, 1.3)
    for v in range(4):
        np.testing.assert_allclose(xy[v], argsoftmax2d(S[:, :, v], 1.3))
    np.testing.assert_allclose(p.sum(axis=(0, 1)), 1.0)
    np.testing.assert_allclose(HeatmapStack(S, 1.3).localize(), xy)


def test_pixel_posterior_examples():
    np.testing.assert_allclose(pixel_posterior(np.full(5, 2.0)), 0.2)
    np.testing.assert_allclose(pixel_posterior([0.0, np.log(2), np.log(3)]), [1 / 6, 2 / 6, 3 / 6])


def test_decode_uv_one_hot():
    topo, _ = load_template()
    k = 13
    q = np.zeros(topo.vertex_count)
    q[k] = 1.0
    for s in UVStrategy:
        np.testing.assert_allclose(decode_uv(q, topo, s), topo.uv_atlas[k], atol=1e-15)


def test_decode_uv_uniform_face_is_centroid():
    topo, _ = load_template()
    f = topo.faces[20]
    q = np.zeros(topo.vertex_count)
    q[f] = 1 / 3
    np.testing.assert_allclose(decode_uv(q, topo, "barycentric"), topo.uv_atlas[f].mean(0))


def test_best_face_tie_lowest_index():
    t = build_topology([(0, 1, 2), (1, 2, 3)], 4, [(0, 0), (1, 0), (0, 1), (1, 1)], np.zeros((4, 3)))
    assert best_face(np.array([0.0, 0.5, 0.5, 0.0]), t) == 0


def test_decode_uv_inside_best_triangle():
    topo, _ = load_template()
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = rng.dirichlet(np.ones(topo.vertex_count))
        f = topo.faces[best_face(q, topo)]
        uv = decode_uv(q, topo)
        tri = topo.uv_atlas[f]
        lam = np.linalg.solve(np.vstack([tri.T, np.ones(3)]), np.append(uv, 1.0))
        assert np.all(lam >= -1e-12)


def test_decode_uv_empty():
    t = build_topology(np.zeros((0, 3), int), 0, np.zeros((0, 2)), np.zeros((0, 3)))
    with pytest.raises(EmptyTopology):
        decode_uv(np.zeros(0), t)


def _head(logits, H=64, W=64, vis=None):
    V = logits.shape[1]
    return RegressionHead(logits, np.zeros(V) if vis is None else vis, H, W)


def test_regression_endpoints_and_midpoint():
    H, W, B, V = 40, 64, 64, 2
    lg = np.full((3, V, B), -1e3)
    lg[:, :, 0] = 0.0
    xyz, w = decode_regression(_head(lg, H, W))
    np.testing.assert_array_equal(xyz, [[-W, -H, -2 * W]] * V)
    np.testing.assert_array_equal(w, 0.5)
    lg = np.full((3, V, B), -1e3)
    lg[:, :, -1] = 0.0
    xyz, _ = decode_regression(_head(lg, H, W))
    np.testing.assert_array_equal(xyz, [[2 * W, 3 * H, 2 * W]] * V)
    xyz, _ = decode_regression(_head(np.zeros((3, V, B)), H, W))
    np.testing.assert_allclose(xyz[:, 0], W / 2)
    np.testing.assert_allclose(xyz[:, 1], H)
    np.testing.assert_allclose(xyz[:, 2], 0.0, atol=1e-12)


def test_bin_positions_span():
    b = bin_positions(64)
    assert b[0] == 0.0 and b[-1] == 64.0 and len(b) == 64


def test_regression_shift_invariance():
    rng = np.random.default_rng(3)
    lg = rng.normal(size=(3, 5, 16))
    a, _ = decode_regression(_head(lg))
    lg2 = lg.copy()
    lg2[1] += 7.5
    b, _ = decode_regression(_head(lg2))
    np.testing.assert_allclose(a, b, atol=1e-12)
    mean, p = argsoftmax1d(lg)
    assert p.shape == lg.shape and np.all((mean >= 0) & (mean <= 16))


def test_regression_head_validation():
    with pytest.raises(ShapeMismatch):
        RegressionHead(np.zeros((2, 3, 4)), np.zeros(3), 8, 8)
    with pytest.raises(ValueError):
        RegressionHead(np.zeros((3, 3, 1)), np.zeros(3), 8, 8)
    with pytest.raises(ShapeMismatch):
        RegressionHead(np.zeros((3, 3, 4)), np.zeros(2), 8, 8)


def test_fusion_examples():
    sp = np.array([[2.0, 2.0]])
    reg = np.array([[4.0, 0.0, 9.0]])
    np.testing.assert_array_equal(fuse_predictions(sp, reg, [0.5]).fused_xyz, [[3.0, 1.0, 9.0]])
    np.testing.assert_array_equal(fuse_predictions(sp, reg, [1.0]).fused_xyz, [[2.0, 2.0, 9.0]])
    np.testing.assert_array_equal(fuse_predictions(sp, reg, [0.0]).fused_xyz, [[4.0, 0.0, 9.0]])


def test_fusion_errors():
    with pytest.raises(VisibilityOutOfRange):
        fuse_predictions(np.zeros((1, 2)), np.zeros((1, 3)), [1.5])
    with pytest.raises(ShapeMismatch):
        fuse_predictions(np.zeros((2, 2)), np.zeros((1, 3)), [0.5])


def test_fusion_linear_in_w():
    rng = np.random.default_rng(4)
    sp, reg = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    w0, w1 = rng.uniform(size=6), rng.uniform(size=6)
    f = lambda w: fuse_predictions(sp, reg, w).fused_xyz[:, :2]  # noqa: E731
    np.testing.assert_allclose(f(0.5 * (w0 + w1)), 0.5 * (f(w0) + f(w1)), atol=1e-14)


def test_fuse_vjp_matches_definition():
    rng = np.random.default_rng(5)
    sp, reg, w = rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), rng.uniform(size=4)
    st = fuse_predictions(sp, reg, w)
    g = rng.normal(size=(4, 3))
    g_sp, g_reg, g_w = fuse_vjp(st, g)
    np.testing.assert_allclose(g_sp, g[:, :2] * w[:, None])
    np.testing.assert_allclose(g_reg[:, 2], g[:, 2])
    np.testing.assert_allclose(g_w, np.sum(g[:, :2] * (sp - reg[:, :2]), axis=1))
