# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled soft-silhouette kernel; mirrors ``_reference.py`` operation for operation."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, floor, ceil, log, fabs, INFINITY

cnp.import_array()

cdef double DEGENERATE_AREA = 1e-12


cdef inline double _sigmoid(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef struct PixelGeom:
    double lam[3]
    double N[3]
    int inside
    double d2
    int edge
    double t


cdef inline void _geom(double[:, ::1] p, double den, double px, double py,
                       PixelGeom* g) nogil:
    cdef int i, j, k, ok = 1
    cdef double ax, ay, bx, by, ex, ey, L, t, qx, qy, dk
    for i in range(3):
        j = (i + 1) % 3
        k = (i + 2) % 3
        ax = p[j, 0] - px
        ay = p[j, 1] - py
        bx = p[k, 0] - px
        by = p[k, 1] - py
        g.N[i] = ax * by - ay * bx
        g.lam[i] = g.N[i] / den
        if g.lam[i] < 0.0:
            ok = 0
    g.inside = ok
    g.d2 = INFINITY
    g.edge = 0
    g.t = 0.0
    for k in range(3):
        j = (k + 1) % 3
        ex = p[j, 0] - p[k, 0]
        ey = p[j, 1] - p[k, 1]
        L = ex * ex + ey * ey
        t = ((px - p[k, 0]) * ex + (py - p[k, 1]) * ey) / L
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = p[k, 0] + t * ex
        qy = p[k, 1] + t * ey
        dk = (px - qx) * (px - qx) + (py - qy) * (py - qy)
        if dk < g.d2:
            g.d2 = dk
            g.edge = k
            g.t = t


cdef inline double _interp(double* vf, PixelGeom* g) nogil:
    if g.inside:
        return g.lam[0] * vf[0] + g.lam[1] * vf[1] + g.lam[2] * vf[2]
    return (1.0 - g.t) * vf[g.edge] + g.t * vf[(g.edge + 1) % 3]


cdef double _cull_radius2(double sigma, double min_influence):
    if min_influence <= 0.0:
        return INFINITY
    return sigma * log((1.0 - min_influence) / min_influence)


cdef int _bbox(double[:, ::1] p, int H, int W, double x0, double y0, double r2,
               int* out):
    cdef double r, xmin, xmax, ymin, ymax
    if r2 == INFINITY:
        out[0] = 0; out[1] = H; out[2] = 0; out[3] = W
        return 1
    r = sqrt(r2)
    xmin = min(p[0, 0], min(p[1, 0], p[2, 0]))
    xmax = max(p[0, 0], max(p[1, 0], p[2, 0]))
    ymin = min(p[0, 1], min(p[1, 1], p[2, 1]))
    ymax = max(p[0, 1], max(p[1, 1], p[2, 1]))
    out[2] = max(0, <int>floor(xmin - r - x0))
    out[3] = min(W, <int>ceil(xmax + r - x0) + 1)
    out[0] = max(0, <int>floor(ymin - r - y0))
    out[1] = min(H, <int>ceil(ymax + r - y0) + 1)
    return out[0] < out[1] and out[2] < out[3]


cdef double _load_face(double[:, ::1] verts, long long[:, ::1] faces, int j,
                       double[:, ::1] p):
    cdef int m
    for m in range(3):
        p[m, 0] = verts[faces[j, m], 0]
        p[m, 1] = verts[faces[j, m], 1]
    return (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])


cdef void _accumulate(double[:, ::1] verts, double[::1] vis, long long[:, ::1] faces,
                      int H, int W, double x0, double y0, double sigma,
                      double min_influence, double[:, ::1] prod, long long[:, ::1] zeros):
    cdef int j, r, c, m
    cdef int box[4]
    cdef double den, D, a, om, r2
    cdef double vf[3]
    cdef PixelGeom g
    cdef double[:, ::1] p = np.empty((3, 2))
    r2 = _cull_radius2(sigma, min_influence)
    for j in range(faces.shape[0]):
        den = _load_face(verts, faces, j, p)
        if fabs(den) < DEGENERATE_AREA:
            continue
        if not _bbox(p, H, W, x0, y0, r2, box):
            continue
        for m in range(3):
            vf[m] = vis[faces[j, m]]
        for r in range(box[0], box[1]):
            for c in range(box[2], box[3]):
                _geom(p, den, x0 + c, y0 + r, &g)
                D = _sigmoid((g.d2 if g.inside else -g.d2) / sigma)
                if D < min_influence:
                    continue
                a = _interp(vf, &g) * D
                om = 1.0 - a
                if om == 0.0:
                    zeros[r, c] += 1
                else:
                    prod[r, c] *= om


def forward(verts, vis, faces, int H, int W, double x0, double y0, double sigma,
            double min_influence):
    cdef double[:, ::1] v = np.ascontiguousarray(verts, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(vis, dtype=np.float64)
    cdef long long[:, ::1] f = np.ascontiguousarray(faces, dtype=np.int64)
    prod = np.ones((H, W))
    zeros = np.zeros((H, W), dtype=np.int64)
    _accumulate(v, w, f, H, W, x0, y0, sigma, min_influence, prod, zeros)
    return 1.0 - np.where(zeros > 0, 0.0, prod)


def backward(verts, vis, faces, int H, int W, double x0, double y0, double sigma,
             double min_influence, grad_image):
    cdef double[:, ::1] v = np.ascontiguousarray(verts, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(vis, dtype=np.float64)
    cdef long long[:, ::1] f = np.ascontiguousarray(faces, dtype=np.int64)
    cdef double[:, ::1] gimg = np.ascontiguousarray(grad_image, dtype=np.float64)
    prod_a = np.ones((H, W))
    zeros_a = np.zeros((H, W), dtype=np.int64)
    cdef double[:, ::1] prod = prod_a
    cdef long long[:, ::1] zeros = zeros_a
    _accumulate(v, w, f, H, W, x0, y0, sigma, min_influence, prod, zeros)

    gv_a = np.zeros((v.shape[0], 2))
    gw_a = np.zeros(w.shape[0])
    cdef double[:, ::1] gv = gv_a
    cdef double[::1] gw = gw_a
    cdef double[:, ::1] p = np.empty((3, 2))
    cdef double[:, ::1] loc = np.empty((3, 2))
    cdef double vf[3]
    cdef double gvis[3]
    cdef int box[4]
    cdef PixelGeom g
    cdef int j, r, c, m, i, jj, kk, k0, k1
    cdef double den, D, wv, a, om, excl, ga, ga_w, ga_d2, r2
    cdef double qx, qy, rx, ry, ex, ey, L, dtx, dty, g_t, gNi, ax, ay, bx, by
    r2 = _cull_radius2(sigma, min_influence)

    for j in range(f.shape[0]):
        den = _load_face(v, f, j, p)
        if fabs(den) < DEGENERATE_AREA:
            continue
        if not _bbox(p, H, W, x0, y0, r2, box):
            continue
        for m in range(3):
            vf[m] = w[f[j, m]]
            gvis[m] = 0.0
            loc[m, 0] = 0.0
            loc[m, 1] = 0.0
        for r in range(box[0], box[1]):
            for c in range(box[2], box[3]):
                _geom(p, den, x0 + c, y0 + r, &g)
                D = _sigmoid((g.d2 if g.inside else -g.d2) / sigma)
                if D < min_influence:
                    continue
                wv = _interp(vf, &g)
                a = wv * D
                om = 1.0 - a
                if zeros[r, c] == 0:
                    excl = prod[r, c] / om
                elif zeros[r, c] == 1 and om == 0.0:
                    excl = prod[r, c]
                else:
                    excl = 0.0
                ga = gimg[r, c] * excl
                if ga == 0.0:
                    continue
                ga_w = ga * D
                ga_d2 = ga * wv * D * (1.0 - D) * (1.0 if g.inside else -1.0) / sigma

                k0 = g.edge
                k1 = (g.edge + 1) % 3
                ex = p[k1, 0] - p[k0, 0]
                ey = p[k1, 1] - p[k0, 1]
                qx = p[k0, 0] + g.t * ex
                qy = p[k0, 1] + g.t * ey
                rx = (x0 + c) - qx
                ry = (y0 + r) - qy
                loc[k0, 0] += -2.0 * rx * (1.0 - g.t) * ga_d2
                loc[k0, 1] += -2.0 * ry * (1.0 - g.t) * ga_d2
                loc[k1, 0] += -2.0 * rx * g.t * ga_d2
                loc[k1, 1] += -2.0 * ry * g.t * ga_d2

                if g.inside:
                    for i in range(3):
                        gvis[i] += g.lam[i] * ga_w
                        gNi = ga_w * (vf[i] - wv) / den
                        jj = (i + 1) % 3
                        kk = (i + 2) % 3
                        ax = p[jj, 0] - (x0 + c)
                        ay = p[jj, 1] - (y0 + r)
                        bx = p[kk, 0] - (x0 + c)
                        by = p[kk, 1] - (y0 + r)
                        loc[jj, 0] += gNi * by
                        loc[jj, 1] -= gNi * bx
                        loc[kk, 0] -= gNi * ay
                        loc[kk, 1] += gNi * ax
                else:
                    gvis[k0] += ga_w * (1.0 - g.t)
                    gvis[k1] += ga_w * g.t
                    if g.t > 0.0 and g.t < 1.0:
                        g_t = ga_w * (vf[k1] - vf[k0])
                        L = ex * ex + ey * ey
                        rx = (x0 + c) - p[k0, 0]
                        ry = (y0 + r) - p[k0, 1]
                        dtx = (rx - 2.0 * g.t * ex) / L
                        dty = (ry - 2.0 * g.t * ey) / L
                        loc[k1, 0] += g_t * dtx
                        loc[k1, 1] += g_t * dty
                        loc[k0, 0] += g_t * (-dtx - ex / L)
                        loc[k0, 1] += g_t * (-dty - ey / L)
        for m in range(3):
            gv[f[j, m], 0] += loc[m, 0]
            gv[f[j, m], 1] += loc[m, 1]
            gw[f[j, m]] += gvis[m]
    return gv_a, gw_a
