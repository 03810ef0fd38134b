"""3-D pose metrics, OKS keypoint AP/AR and geodesic DensePose AP/AR."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, EmptyInstance, NoInstances, ShapeMismatch
from .mesh import BarycentricCoord, MeshTopology

THRESHOLDS = np.round(np.arange(10) * 0.05 + 0.50, 2)  # 0.50:0.05:0.95
# slack for scores built to land exactly on a threshold
THRESHOLD_SLACK = 1e-12

GPS_KAPPA = 0.255
OKS_KAPPA = 0.1


@dataclass(frozen=True, eq=False)
class AlignmentTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation


def procrustes_align(pred, gt) -> AlignmentTransform:
    """Similarity transform minimising sum ||s R pred + t - gt||^2 (proper rotation)."""
    X = np.asarray(pred, dtype=float)
    Y = np.asarray(gt, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ShapeMismatch(f"pred {X.shape} and gt {Y.shape} must be matching (N, 3)")
    if len(X) < 3:
        raise DegenerateConfiguration("need at least three points")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateConfiguration("points are collinear or coincident")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    E = np.diag([1.0, 1.0, d])
    R = U @ E @ Vt
    s = float(np.trace(np.diag(S) @ E) / np.sum(Xc * Xc))
    return AlignmentTransform(s, R, my - s * R @ mx)


def _mean_dist(a, b) -> float:
    return float(np.mean(np.linalg.norm(a - b, axis=-1))) if len(a) else 0.0


def pose_metrics(pred_joints, gt_joints, pred_vertices, gt_vertices, root_index: int,
                 unit_to_mm: float = 1.0) -> dict[str, float]:
    pj, gj = np.asarray(pred_joints, float), np.asarray(gt_joints, float)
    pv, gv = np.asarray(pred_vertices, float), np.asarray(gt_vertices, float)
    if pj.shape != gj.shape or pv.shape != gv.shape:
        raise ShapeMismatch("prediction and ground truth shapes differ")
    if not 0 <= root_index < len(gj):
        raise ShapeMismatch(f"root index {root_index} out of range")
    shift = gj[root_index] - pj[root_index]
    aligned = procrustes_align(pj, gj).apply(pj)
    return {
        "mpjpe": unit_to_mm * _mean_dist(pj + shift, gj),
        "pa_mpjpe": unit_to_mm * _mean_dist(aligned, gj),
        "pve": unit_to_mm * _mean_dist(pv + shift, gv),
    }


def threshold_ap(scores) -> float:
    s = np.asarray(scores, dtype=float)
    return float(np.mean([(s >= t - THRESHOLD_SLACK).mean() for t in THRESHOLDS]))


def oks(pred, gt, area: float, kappa=OKS_KAPPA, labeled=None) -> float:
    """Object keypoint similarity over labelled joints."""
    p, g = np.asarray(pred, float), np.asarray(gt, float)
    d2 = np.sum((p - g) ** 2, axis=-1)
    k = np.broadcast_to(np.asarray(kappa, float), d2.shape)
    m = np.ones(len(d2), bool) if labeled is None else np.asarray(labeled, bool)
    if not m.any():
        return 0.0
    return float(np.mean(np.exp(-d2[m] / (2.0 * area * k[m] ** 2))))


def keypoint_ap(pred_sets, gt_sets, areas, oks_kappa=OKS_KAPPA, labeled=None) -> dict[str, float]:
    """AP/AR over OKS thresholds for pre-paired single-person instances.

    With one prediction per ground-truth instance, precision and recall at each
    threshold coincide, so AP equals AR.
    """
    if len(gt_sets) == 0:
        raise NoInstances("no ground-truth instances")
    if len(pred_sets) != len(gt_sets) or len(areas) != len(gt_sets):
        raise ShapeMismatch("pred, gt and area lists must pair up")
    labeled = labeled if labeled is not None else [None] * len(gt_sets)
    scores = [oks(p, g, a, oks_kappa, lab) for p, g, a, lab in zip(pred_sets, gt_sets, areas, labeled)]
    ap = threshold_ap(scores)
    return {"ap": ap, "ar": ap, "oks": scores}


@dataclass(frozen=True)
class CorrespondencePair:
    gt: BarycentricCoord
    pred: BarycentricCoord
    gps: float


def snap_to_vertex(bc: BarycentricCoord, topology: MeshTopology) -> int:
    """Template vertex nearest (in rest pose) to a barycentric surface point."""
    idx = topology.faces[bc.face]
    tri = topology.rest_positions[idx]
    point = np.asarray(bc.weights) @ tri
    return int(idx[int(np.argmin(np.linalg.norm(tri - point, axis=1)))])


def gps_score(g: float, kappa: float = GPS_KAPPA) -> float:
    return float(np.exp(-g * g / (2.0 * kappa * kappa)))


def correspondence_pairs(gt_bcs, pred_bcs, topology: MeshTopology, geodesic=None,
                         kappa: float = GPS_KAPPA) -> list[CorrespondencePair]:
    if geodesic is None:
        G = topology.geodesics
        geodesic = lambda a, b: G[a, b]  # noqa: E731
    out = []
    for g, p in zip(gt_bcs, pred_bcs):
        err = float(geodesic(snap_to_vertex(g, topology), snap_to_vertex(p, topology)))
        out.append(CorrespondencePair(g, p, gps_score(err, kappa)))
    return out


def densepose_ap(instances, topology: MeshTopology | None = None, geodesic=None,
                 kappa: float = GPS_KAPPA) -> dict[str, float]:
    """AP/AR over per-instance mean GPS thresholds.

    ``instances`` holds, per instance, either ready :class:`CorrespondencePair`
    lists or ``(gt_bc, pred_bc)`` tuples (scored with ``geodesic``, which
    defaults to the template's graph geodesics).
    """
    if len(instances) == 0:
        raise NoInstances("no DensePose instances")
    per_instance = []
    for pairs in instances:
        if len(pairs) == 0:
            raise EmptyInstance("instance without correspondences")
        if not isinstance(pairs[0], CorrespondencePair):
            if topology is None:
                raise ValueError("topology is required to score raw barycentric pairs")
            gts, preds = zip(*pairs)
            pairs = correspondence_pairs(gts, preds, topology, geodesic, kappa)
        per_instance.append(float(np.mean([p.gps for p in pairs])))
    ap = threshold_ap(per_instance)
    return {"ap": ap, "ar": ap, "gps": per_instance}


def metric_report(pose: dict, kp: dict, dp: dict, n_instances: int) -> dict:
    return {
        "mpjpe": pose["mpjpe"],
        "pa_mpjpe": pose["pa_mpjpe"],
        "pve": pose["pve"],
        "kp_ap": kp["ap"],
        "kp_ar": kp["ar"],
        "dp_ap": dp["ap"],
        "dp_ar": dp["ar"],
        "n_instances": int(n_instances),
    }
