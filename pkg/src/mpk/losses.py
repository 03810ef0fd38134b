"""Training losses with analytic gradients and their weighted total.

Every loss returns a :class:`LossValue` whose ``grads`` map input names to
arrays shaped like those inputs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .decode import localize_vertices, localize_vertices_vjp, pixel_log_posterior
from .errors import MissingComponent, NoLabeledVertices, ShapeMismatch
from .mesh import BarycentricCoord, Landmarker, MeshTopology

CE_LOG_FLOOR = np.log(1e-30)
NORM_EPS = 1e-12
VIS_CLAMP = 1e-7

VISIBLE, INVISIBLE, UNLABELED = 1, 0, -1


@dataclass(frozen=True)
class SurfaceAnnotation:
    pixel: tuple  # (x, y) pixels, continuous
    bc: BarycentricCoord

    def __post_init__(self):
        object.__setattr__(self, "pixel", tuple(float(x) for x in self.pixel))

    def grid_pixel(self) -> tuple[int, int]:
        """Nearest integer pixel (col, row) used to index heatmap stacks."""
        return int(round(self.pixel[0])), int(round(self.pixel[1]))


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)

    def scaled(self, k: float) -> "LossValue":
        return LossValue(k * self.value, {n: k * g for n, g in self.grads.items()})


def zero_loss() -> LossValue:
    return LossValue(0.0, {})


def target_distribution(ann: SurfaceAnnotation, topology: MeshTopology) -> np.ndarray:
    p = np.zeros(topology.vertex_count)
    p[topology.faces[ann.bc.face]] = ann.bc.weights
    return p


def barycentric_cross_entropy(scores_at_pixel, ann: SurfaceAnnotation,
                              topology: MeshTopology) -> LossValue:
    """Cross-entropy between the pixel posterior and the annotation's barycentrics."""
    s = np.asarray(scores_at_pixel, dtype=float)
    p = target_distribution(ann, topology)
    logq = np.maximum(pixel_log_posterior(s), CE_LOG_FLOOR)
    value = -float(np.sum(p * logq))
    return LossValue(value, {"scores": np.exp(logq) - p})


def uv_consistency_loss(heatmaps, alpha: float, ann: SurfaceAnnotation,
                        topology: MeshTopology) -> LossValue:
    """Distance between the annotated pixel and the barycentric mix of localized vertices."""
    S = np.asarray(heatmaps, dtype=float)
    idx = topology.faces[ann.bc.face]
    xy, probs = localize_vertices(S[:, :, idx], alpha)
    value, g_xy = consistency_from_positions(xy, ann)
    grad = np.zeros_like(S)
    grad[:, :, idx] = localize_vertices_vjp(probs, xy, alpha, g_xy)
    return LossValue(value, {"heatmaps": grad})


def consistency_from_positions(face_xy, ann: SurfaceAnnotation):
    """Consistency value and its gradient w.r.t. the annotated face's three (x, y) positions."""
    beta = np.asarray(ann.bc.weights)
    d = np.asarray(ann.pixel) - beta @ np.asarray(face_xy, dtype=float)
    value = float(np.sqrt(d @ d + NORM_EPS))
    return value, -beta[:, None] * (d / value)[None, :]


def visibility_bce(visibility, labels) -> LossValue:
    """Mean binary cross-entropy over labelled vertices (labels 1/0, -1 unlabelled)."""
    w = np.asarray(visibility, dtype=float)
    y = np.asarray(labels)
    if w.shape != y.shape:
        raise ShapeMismatch("visibility and labels differ in shape")
    m = y != UNLABELED
    n = int(m.sum())
    if n == 0:
        raise NoLabeledVertices("no vertex carries a visibility label")
    wc = np.clip(w, VIS_CLAMP, 1.0 - VIS_CLAMP)
    t = (y == VISIBLE).astype(float)
    per = -(t * np.log(wc) + (1.0 - t) * np.log1p(-wc))
    grad = np.where(m, (-t / wc + (1.0 - t) / (1.0 - wc)) / n, 0.0)
    return LossValue(float(per[m].sum() / n), {"visibility": grad})


# -- geometric losses ----------------------------------------------------------

def _face_normals(x, faces):
    a, b = x[faces[:, 1]] - x[faces[:, 0]], x[faces[:, 2]] - x[faces[:, 0]]
    return np.cross(a, b), a, b


def _cross_backward(c, a, b, faces, V):
    """Scatter d<c, a x b> onto the three face vertices."""
    ga = np.cross(b, c)  # d/da of c.(a x b)
    gb = np.cross(c, a)
    g = np.zeros((V, 3))
    np.add.at(g, faces[:, 1], ga)
    np.add.at(g, faces[:, 2], gb)
    np.add.at(g, faces[:, 0], -(ga + gb))
    return g


def _unit_dot_backward(n, m_hat, norm):
    """d(n_hat . m_hat)/dn for n_hat = n / |n|."""
    n_hat = n / norm[:, None]
    return (m_hat - np.sum(n_hat * m_hat, axis=1, keepdims=True) * n_hat) / norm[:, None]


def vertex_loss(pred, gt) -> LossValue:
    d = pred - gt
    V = len(pred)
    return LossValue(float(np.sum(d * d) / V), {"pred": 2.0 * d / V})


def edge_loss(pred, gt, topology: MeshTopology, norm: str = "l1") -> LossValue:
    e = topology.edges
    ep = pred[e[:, 1]] - pred[e[:, 0]]
    lp = np.linalg.norm(ep, axis=1)
    lg = np.linalg.norm(gt[e[:, 1]] - gt[e[:, 0]], axis=1)
    diff = lp - lg
    E = len(e)
    if norm == "l1":
        value, coef = np.abs(diff).sum() / E, np.sign(diff) / E
    elif norm == "l2":
        value, coef = np.sum(diff * diff) / E, 2.0 * diff / E
    else:
        raise ValueError(f"unknown edge norm {norm!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(lp[:, None] > 0, ep / lp[:, None], 0.0)
    ge = coef[:, None] * u
    grad = np.zeros_like(pred)
    np.add.at(grad, e[:, 1], ge)
    np.add.at(grad, e[:, 0], -ge)
    return LossValue(float(value), {"pred": grad})


def normal_loss(pred, gt, topology: MeshTopology, mode: str = "face") -> LossValue:
    """Mean (1 - cosine) between predicted and GT normals.

    ``mode="face"`` compares unit face normals; ``mode="vertex"`` compares
    area-weighted vertex normals. Degenerate normals are skipped.
    """
    faces, V = topology.faces, len(pred)
    n_p, a, b = _face_normals(pred, faces)
    n_g, _, _ = _face_normals(gt, faces)
    if mode == "vertex":
        acc_p, acc_g = np.zeros((V, 3)), np.zeros((V, 3))
        for k in range(3):
            np.add.at(acc_p, faces[:, k], n_p)
            np.add.at(acc_g, faces[:, k], n_g)
        n_p_used, n_g_used = acc_p, acc_g
    elif mode == "face":
        n_p_used, n_g_used = n_p, n_g
    else:
        raise ValueError(f"unknown normal mode {mode!r}")

    len_p = np.linalg.norm(n_p_used, axis=1)
    len_g = np.linalg.norm(n_g_used, axis=1)
    ok = (len_p > 1e-12) & (len_g > 1e-12)
    count = int(ok.sum())
    if count == 0:
        return LossValue(0.0, {"pred": np.zeros_like(pred)})
    m_hat = np.zeros_like(n_g_used)
    m_hat[ok] = n_g_used[ok] / len_g[ok, None]
    cos = np.zeros(len(n_p_used))
    cos[ok] = np.sum(n_p_used[ok] * m_hat[ok], axis=1) / len_p[ok]
    value = float(np.sum(1.0 - cos[ok]) / count)

    c = np.zeros_like(n_p_used)
    c[ok] = -_unit_dot_backward(n_p_used[ok], m_hat[ok], len_p[ok]) / count
    if mode == "vertex":
        c = c[faces[:, 0]] + c[faces[:, 1]] + c[faces[:, 2]]
    return LossValue(value, {"pred": _cross_backward(c, a, b, faces, V)})


def geometric_losses(pred, gt, topology: MeshTopology, edge_norm: str = "l1",
                     normal_mode: str = "face") -> dict[str, LossValue]:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape != (topology.vertex_count, 3):
        raise ShapeMismatch(f"pred {pred.shape} and gt {gt.shape} must be (V, 3)")
    return {
        "v": vertex_loss(pred, gt),
        "e": edge_loss(pred, gt, topology, edge_norm),
        "n": normal_loss(pred, gt, topology, normal_mode),
    }


def joint_localization_loss(pred_vertices, gt_joints, lm: Landmarker, mode: str = "3d",
                            camera=None) -> LossValue:
    """Mean squared joint error in 3-D or after weak-perspective projection.

    In ``"2d"`` mode, ``camera`` (anything with ``scale`` and ``principal``)
    projects model-unit joints to pixels; without a camera the predicted XY
    are taken as already in the image frame.
    """
    X = np.asarray(pred_vertices, dtype=float)
    G = np.asarray(gt_joints, dtype=float)
    if X.ndim != 2 or X.shape[1] != 3 or X.shape[0] != lm.matrix.shape[1]:
        raise ShapeMismatch("pred_vertices must be (V, 3) matching the landmarker")
    J = lm.joint_count
    joints = lm.matrix @ X
    if mode == "3d":
        if G.shape != (J, 3):
            raise ShapeMismatch(f"gt joints must be ({J}, 3)")
        d = joints - G
        g_joints = 2.0 * d / J
    elif mode == "2d":
        if G.shape != (J, 2):
            raise ShapeMismatch(f"gt joints must be ({J}, 2) in 2-D mode")
        s = 1.0 if camera is None else float(camera.scale)
        c = np.zeros(2) if camera is None else np.asarray(camera.principal, dtype=float)
        d = s * joints[:, :2] + c - G
        g_joints = np.zeros((J, 3))
        g_joints[:, :2] = 2.0 * s * d / J
    else:
        raise ValueError(f"unknown joint loss mode {mode!r}")
    value = float(np.sum(d * d) / J) if J else 0.0
    return LossValue(value, {"pred": lm.matrix.T @ g_joints})


# -- weighting -----------------------------------------------------------------

COMPONENTS = ("bl", "cons", "vis", "v", "e", "n", "j", "sil_l2", "sil_bnd")


@dataclass
class LossWeights:
    w_bl: float = 1.0
    w_cons: float = 1.0
    w_vis: float = 10.0
    w_v: float = 0.1
    w_e: float = 1.0
    w_n: float = 0.1
    w_j: float = 1.0
    w_sil_l2: float = 100.0
    w_sil_bnd: float = 1.0

    @classmethod
    def from_dict(cls, d: dict | None) -> "LossWeights":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def from_json(cls, text: str) -> "LossWeights":
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def weight(self, name: str) -> float:
        return getattr(self, "w_" + name)


def total_loss(components: dict[str, LossValue], weights: LossWeights | None = None) -> LossValue:
    """Weighted sum of every named component; gradients sharing an input name add up."""
    weights = weights or LossWeights()
    missing = [c for c in COMPONENTS if c not in components]
    if missing:
        raise MissingComponent(f"missing loss components: {missing}")
    value, grads = 0.0, {}
    for name in COMPONENTS:
        lv, w = components[name], weights.weight(name)
        value += w * lv.value
        for key, g in lv.grads.items():
            grads[key] = grads[key] + w * g if key in grads else w * np.asarray(g, dtype=float)
    return LossValue(float(value), grads)
