"""Pure numpy soft-silhouette kernel (fallback when the compiled one is absent).

Must stay numerically identical in semantics to ``_kernels.pyx``: per face, a
pixel inside the expanded bounding box gets influence
``D = sigmoid(+-d^2 / sigma)`` and visibility interpolated at the closest
point of the triangle; faces with ``D < min_influence`` at a pixel are skipped.
"""
from __future__ import annotations

import numpy as np

DEGENERATE_AREA = 1e-12


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def cull_radius2(sigma: float, min_influence: float) -> float:
    if min_influence <= 0.0:
        return np.inf
    return sigma * np.log((1.0 - min_influence) / min_influence)


def _face_pixels(p, H, W, x0, y0, r2):
    """Row/col index ranges of the bounding box grown by sqrt(r2), clipped to the grid."""
    if not np.isfinite(r2):
        return 0, H, 0, W
    r = np.sqrt(r2)
    c0 = max(0, int(np.floor(p[:, 0].min() - r - x0)))
    c1 = min(W, int(np.ceil(p[:, 0].max() + r - x0)) + 1)
    r0 = max(0, int(np.floor(p[:, 1].min() - r - y0)))
    r1 = min(H, int(np.ceil(p[:, 1].max() + r - y0)) + 1)
    return r0, r1, c0, c1


def _face_terms(p, P):
    """Geometry of one triangle ``p`` (3, 2) against pixel centres ``P`` (N, 2)."""
    den = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
    N = np.empty((len(P), 3))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        a = p[j] - P
        b = p[k] - P
        N[:, i] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    lam = N / den
    inside = np.all(lam >= 0.0, axis=1)

    d2 = np.full(len(P), np.inf)
    edge = np.zeros(len(P), dtype=np.int64)
    tt = np.zeros(len(P))
    for k in range(3):
        e0, e1 = p[k], p[(k + 1) % 3]
        e = e1 - e0
        L = e @ e
        t = np.clip(((P - e0) @ e) / L, 0.0, 1.0)
        q = e0 + t[:, None] * e
        dk = np.sum((P - q) ** 2, axis=1)
        better = dk < d2
        d2 = np.where(better, dk, d2)
        edge = np.where(better, k, edge)
        tt = np.where(better, t, tt)
    return den, N, lam, inside, d2, edge, tt


def _interp_vis(vis_f, lam, inside, edge, tt):
    k0, k1 = edge, (edge + 1) % 3
    outside_w = (1.0 - tt) * vis_f[k0] + tt * vis_f[k1]
    return np.where(inside, lam @ vis_f, outside_w)


def _pixel_centres(r0, r1, c0, c1, x0, y0):
    rr, cc = np.mgrid[r0:r1, c0:c1]
    return np.column_stack([cc.ravel() + x0, rr.ravel() + y0]).astype(float)


def _iter_faces(verts, faces, H, W, x0, y0, r2):
    for j, f in enumerate(faces):
        p = verts[f]
        den = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
        if abs(den) < DEGENERATE_AREA:
            continue
        r0, r1, c0, c1 = _face_pixels(p, H, W, x0, y0, r2)
        if r0 >= r1 or c0 >= c1:
            continue
        yield j, f, p, (r0, r1, c0, c1)


def _accumulate(verts, vis, faces, H, W, x0, y0, sigma, min_influence):
    prod = np.ones((H, W))
    zeros = np.zeros((H, W), dtype=np.int64)
    r2 = cull_radius2(sigma, min_influence)
    for _, f, p, (r0, r1, c0, c1) in _iter_faces(verts, faces, H, W, x0, y0, r2):
        P = _pixel_centres(r0, r1, c0, c1, x0, y0)
        _, _, lam, inside, d2, edge, tt = _face_terms(p, P)
        D = _sigmoid(np.where(inside, d2, -d2) / sigma)
        a = _interp_vis(vis[f], lam, inside, edge, tt) * D
        a = np.where(D < min_influence, 0.0, a)
        one_minus = (1.0 - a).reshape(r1 - r0, c1 - c0)
        is_zero = one_minus == 0.0
        zeros[r0:r1, c0:c1] += is_zero
        prod[r0:r1, c0:c1] *= np.where(is_zero, 1.0, one_minus)
    return prod, zeros


def forward(verts, vis, faces, H, W, x0, y0, sigma, min_influence):
    prod, zeros = _accumulate(verts, vis, faces, H, W, x0, y0, sigma, min_influence)
    return 1.0 - np.where(zeros > 0, 0.0, prod)


def backward(verts, vis, faces, H, W, x0, y0, sigma, min_influence, grad_image):
    prod, zeros = _accumulate(verts, vis, faces, H, W, x0, y0, sigma, min_influence)
    gv = np.zeros_like(verts)
    gw = np.zeros_like(vis)
    r2 = cull_radius2(sigma, min_influence)
    for _, f, p, (r0, r1, c0, c1) in _iter_faces(verts, faces, H, W, x0, y0, r2):
        P = _pixel_centres(r0, r1, c0, c1, x0, y0)
        den, N, lam, inside, d2, edge, tt = _face_terms(p, P)
        z = np.where(inside, d2, -d2) / sigma
        D = _sigmoid(z)
        vis_f = vis[f]
        w = _interp_vis(vis_f, lam, inside, edge, tt)
        a = w * D
        active = D >= min_influence
        one_minus = 1.0 - a
        pr = prod[r0:r1, c0:c1].ravel()
        zc = zeros[r0:r1, c0:c1].ravel()
        # dI/da = product of (1 - a_k) over the other faces
        excl = np.where(
            zc == 0,
            pr / np.where(one_minus == 0.0, 1.0, one_minus),
            np.where((zc == 1) & (one_minus == 0.0), pr, 0.0),
        )
        ga = np.where(active, grad_image[r0:r1, c0:c1].ravel() * excl, 0.0)
        ga_w = ga * D
        ga_d2 = ga * w * D * (1.0 - D) * np.where(inside, 1.0, -1.0) / sigma

        k0, k1 = edge, (edge + 1) % 3
        e0, e1 = p[k0], p[k1]
        q = e0 + tt[:, None] * (e1 - e0)
        r_pq = P - q
        g_e0 = -2.0 * r_pq * ((1.0 - tt) * ga_d2)[:, None]
        g_e1 = -2.0 * r_pq * (tt * ga_d2)[:, None]

        # visibility interpolation: outside pixels follow the clamped edge parameter
        out = ~inside
        e = e1 - e0
        L = np.sum(e * e, axis=1)
        rr = P - e0
        interior_t = (tt > 0.0) & (tt < 1.0) & out
        g_t = np.where(interior_t, ga_w * (vis_f[k1] - vis_f[k0]), 0.0)
        dt_de = (rr - 2.0 * tt[:, None] * e) / L[:, None]
        g_e1 += g_t[:, None] * dt_de
        g_e0 += g_t[:, None] * (-dt_de - e / L[:, None])

        local = np.zeros((len(P), 3, 2))
        for k in range(3):
            sel0, sel1 = k0 == k, k1 == k
            local[:, k] += np.where(sel0[:, None], g_e0, 0.0) + np.where(sel1[:, None], g_e1, 0.0)

        gN = np.where(inside[:, None], ga_w[:, None] * (vis_f[None, :] - w[:, None]) / den, 0.0)
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            a_ = p[j] - P
            b_ = p[k] - P
            local[:, j, 0] += gN[:, i] * b_[:, 1]
            local[:, j, 1] -= gN[:, i] * b_[:, 0]
            local[:, k, 0] -= gN[:, i] * a_[:, 1]
            local[:, k, 1] += gN[:, i] * a_[:, 0]

        gv_face = local.sum(axis=0)
        for m in range(3):
            gv[f[m]] += gv_face[m]

        g_lam = np.where(inside[:, None], lam * ga_w[:, None], 0.0)
        g_out0 = np.where(out, ga_w * (1.0 - tt), 0.0)
        g_out1 = np.where(out, ga_w * tt, 0.0)
        for m in range(3):
            gw[f[m]] += g_lam[:, m].sum() + g_out0[k0 == m].sum() + g_out1[k1 == m].sum()
    return gv, gw
