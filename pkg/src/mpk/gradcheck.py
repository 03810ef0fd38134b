"""Central finite-difference checks for every analytic gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .mesh import Landmarker, BarycentricCoord, build_topology
from .softras import distance_field, render_soft_silhouette, \
    render_soft_silhouette_vjp, silhouette_loss

FD_STEP = 1e-6
REL_FLOOR = 1e-8
LOSS_TOL = 1e-4
RENDER_TOL = 1e-3


def numeric_gradient(f, x, eps: float = FD_STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; only ``coords`` (flat indices) if given."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


@dataclass
class CheckResult:
    name: str
    tolerance: float
    errors: list

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


# -- random instances ------------------------------------------------------------

def random_grid_mesh(rng, nx: int = 3, ny: int = 3, jitter: float = 0.25):
    """Jittered planar grid with a random depth field: a small non-degenerate mesh."""
    ys, xs = np.mgrid[0:ny, 0:nx]
    pos = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)]).astype(float)
    pos[:, :2] += rng.uniform(-jitter, jitter, size=(nx * ny, 2))
    pos[:, 2] = rng.uniform(-0.5, 0.5, size=nx * ny)
    faces = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            faces += [(a, a + 1, a + nx), (a + 1, a + nx + 1, a + nx)]
    uv = np.clip((pos[:, :2] + 0.5) / (max(nx, ny) + 1), 0.0, 1.0)
    return build_topology(np.array(faces), nx * ny, uv, pos)


def _random_bc(rng, topo):
    f = int(rng.integers(topo.face_count))
    w = rng.dirichlet(np.ones(3))
    return BarycentricCoord(f, tuple(w))


def _check(f, grad, x, coords=None) -> float:
    num = numeric_gradient(f, x, coords=coords)
    if coords is not None:
        mask = np.zeros(np.size(x), bool)
        mask[list(coords)] = True
        return relative_error(np.ravel(grad)[mask], np.ravel(num)[mask])
    return relative_error(grad, num)


def check_cross_entropy(rng):
    topo = random_grid_mesh(rng)
    ann = L.SurfaceAnnotation((0.0, 0.0), _random_bc(rng, topo))
    s = rng.normal(0, 2, topo.vertex_count)
    g = L.barycentric_cross_entropy(s, ann, topo).grads["scores"]
    return _check(lambda x: L.barycentric_cross_entropy(x, ann, topo).value, g, s)


def check_consistency(rng):
    topo = random_grid_mesh(rng, 2, 2)
    ann = L.SurfaceAnnotation(tuple(rng.uniform(0, 5, 2)), _random_bc(rng, topo))
    S = rng.normal(0, 1, (6, 6, topo.vertex_count))
    alpha = float(rng.uniform(0.5, 2.0))
    g = L.uv_consistency_loss(S, alpha, ann, topo).grads["heatmaps"]
    return _check(lambda x: L.uv_consistency_loss(x, alpha, ann, topo).value, g, S)


def check_visibility(rng):
    V = 12
    w = rng.uniform(0.05, 0.95, V)
    labels = rng.integers(-1, 2, V)
    labels[0] = 1
    g = L.visibility_bce(w, labels).grads["visibility"]
    return _check(lambda x: L.visibility_bce(x, labels).value, g, w)


def _geometric_check(name, rng, **kw):
    topo = random_grid_mesh(rng)
    gt = topo.rest_positions
    pred = gt + rng.normal(0, 0.3, gt.shape)
    lv = L.geometric_losses(pred, gt, topo, **kw)[name]
    return _check(lambda x: L.geometric_losses(x, gt, topo, **kw)[name].value, lv.grads["pred"], pred)


def check_vertex(rng):
    return _geometric_check("v", rng)


def check_edge(rng):
    return _geometric_check("e", rng, edge_norm=str(rng.choice(["l1", "l2"])))


def check_normal(rng):
    return _geometric_check("n", rng, normal_mode=str(rng.choice(["face", "vertex"])))


def check_joint(rng):
    topo = random_grid_mesh(rng)
    V = topo.vertex_count
    m = rng.uniform(0, 1, (4, V)) * (rng.uniform(size=(4, V)) < 0.4)
    m[:, 0] += 0.1
    lm = Landmarker(m / m.sum(axis=1, keepdims=True))
    pred = rng.normal(0, 1, (V, 3))
    mode = str(rng.choice(["3d", "2d"]))
    gt = rng.normal(0, 1, (4, 3 if mode == "3d" else 2))

    class Cam:
        scale = float(rng.uniform(5, 20))
        principal = tuple(rng.uniform(0, 30, 2))

    cam = Cam if mode == "2d" else None
    lv = L.joint_localization_loss(pred, gt, lm, mode, cam)
    return _check(lambda x: L.joint_localization_loss(x, gt, lm, mode, cam).value, lv.grads["pred"], pred)


def _random_silhouette_problem(rng, H=12, W=12):
    topo = random_grid_mesh(rng, 3, 3, jitter=0.2)
    v2 = topo.rest_positions[:, :2] * rng.uniform(3.0, 4.0) + rng.uniform(1.0, 3.0, 2)
    w = rng.uniform(0.2, 0.95, topo.vertex_count)
    sigma = float(rng.uniform(0.5, 2.0))
    mask = rng.uniform(size=(H, W)) < 0.5
    return topo, v2, w, sigma, mask


def check_silhouette_l2(rng):
    img = rng.uniform(0, 1, (10, 10))
    mask = rng.uniform(size=img.shape) < 0.5
    df = distance_field(mask)
    g = silhouette_loss(img, mask, df).l2.grads["silhouette"]
    return _check(lambda x: silhouette_loss(x, mask, df).l2.value, g, img)


def check_silhouette_boundary(rng):
    img = rng.uniform(0, 1, (10, 10))
    mask = rng.uniform(size=img.shape) < 0.5
    df = distance_field(mask)
    g = silhouette_loss(img, mask, df).boundary.grads["silhouette"]
    return _check(lambda x: silhouette_loss(x, mask, df).boundary.value, g, img)


def check_render(rng):
    """Silhouette loss through the rasterizer, w.r.t. vertex positions and visibility."""
    topo, v2, w, sigma, mask = _random_silhouette_problem(rng)
    grid = mask.shape
    df = distance_field(mask)
    weights = (float(rng.uniform(1, 100)), float(rng.uniform(0, 1)))

    def loss(v, vis):
        img = render_soft_silhouette(v, vis, topo, grid, sigma, min_influence=0.0)
        sl = silhouette_loss(img, mask, df, *weights).combined
        return sl

    sl = loss(v2, w)
    gv, gw = render_soft_silhouette_vjp(v2, w, topo, grid, sl.grads["silhouette"], sigma,
                                        min_influence=0.0)
    ev = _check(lambda x: loss(x, w).value, gv, v2)
    ew = _check(lambda x: loss(v2, x).value, gw, w)
    return max(ev, ew)


def check_total(rng):
    """Weighted total of random components sharing inputs."""
    topo = random_grid_mesh(rng)
    gt = topo.rest_positions
    pred = gt + rng.normal(0, 0.3, gt.shape)
    weights = L.LossWeights(**{f"w_{c}": float(rng.uniform(0.1, 10)) for c in L.COMPONENTS})
    lm = Landmarker(np.full((2, topo.vertex_count), 1.0 / topo.vertex_count))
    gj = rng.normal(0, 1, (2, 3))

    def comps(x):
        c = dict.fromkeys(L.COMPONENTS, L.zero_loss())
        c.update(L.geometric_losses(x, gt, topo))
        c["j"] = L.joint_localization_loss(x, gj, lm)
        return c

    tot = L.total_loss(comps(pred), weights)
    return _check(lambda x: L.total_loss(comps(x), weights).value, tot.grads["pred"], pred)


def check_fit_objective(rng):
    """Full fitting objective w.r.t. every free parameter group (sampled coordinates)."""
    from .fitting import FitProblem
    from .synth import SceneConfig, generate_scene

    scene = generate_scene(int(rng.integers(1 << 16)),
                           SceneConfig(H=16, W=16, margin=2, n_annotations=6))
    prob = FitProblem(scene, bins=8, sigma=1.0, min_influence=0.0)
    params = prob.init_params(int(rng.integers(1 << 16)), scale=0.5)
    st = prob.evaluate(params)
    worst = 0.0
    for name, x in params.items():
        coords = rng.choice(x.size, size=min(12, x.size), replace=False)

        def f(v, name=name):
            return prob.evaluate({**params, name: v}).total.value

        worst = max(worst, _check(f, st.total.grads[name], x, coords))
    return worst


LOSS_CHECKS = {
    "cross_entropy": (check_cross_entropy, LOSS_TOL),
    "consistency": (check_consistency, LOSS_TOL),
    "visibility_bce": (check_visibility, LOSS_TOL),
    "vertex": (check_vertex, LOSS_TOL),
    "edge": (check_edge, LOSS_TOL),
    "normal": (check_normal, LOSS_TOL),
    "joint": (check_joint, LOSS_TOL),
    "silhouette_l2": (check_silhouette_l2, LOSS_TOL),
    "silhouette_boundary": (check_silhouette_boundary, LOSS_TOL),
    "total": (check_total, LOSS_TOL),
    "render": (check_render, RENDER_TOL),
    "fit_objective": (check_fit_objective, RENDER_TOL),
}


def run_checks(seed: int, instances: int = 20, loss_tol: float = LOSS_TOL,
               render_tol: float = RENDER_TOL, only=None) -> list[CheckResult]:
    results = []
    for i, (name, (fn, default_tol)) in enumerate(LOSS_CHECKS.items()):
        if only and name not in only:
            continue
        tol = render_tol if default_tol == RENDER_TOL else loss_tol
        rng = np.random.default_rng([seed, i])
        results.append(CheckResult(name, tol, [fn(rng) for _ in range(instances)]))
    return results
