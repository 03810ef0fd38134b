"""Direct optimization of decoder inputs against the full training objective.

No backbone: heatmap scores, regression logits and visibility logits are the
free parameters, so every analytic gradient in the pipeline is exercised end
to end on one synthetic scene.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .decode import (RegressionHead, decode_regression, decode_regression_vjp, fuse_predictions,
                     fuse_vjp, localize_vertices, localize_vertices_vjp)
from .errors import DivergedTraining
from .mesh import landmark_joints
from .softras import DEFAULT_MIN_INFLUENCE, distance_field, pad_mask, padded_grid, render_soft_silhouette, \
    render_soft_silhouette_vjp, silhouette_loss

PARAM_NAMES = ("scores", "logits", "visibility_logits")


@dataclass
class FitState:
    total: L.LossValue           # grads keyed by PARAM_NAMES
    components: dict             # name -> LossValue on intermediate tensors
    vertices: object             # decode.VertexState


class FitProblem:
    def __init__(self, scene, weights: L.LossWeights | None = None, alpha: float = 1.0,
                 sigma: float = 1.0, bins: int = 64, pad: float = 0.5,
                 edge_norm: str = "l1", normal_mode: str = "face",
                 min_influence: float = DEFAULT_MIN_INFLUENCE, boundary_reduction: str = "mean"):
        if boundary_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown boundary reduction {boundary_reduction!r}")
        self.scene = scene
        self.weights = weights or L.LossWeights()
        self.alpha = float(alpha)
        self.sigma = float(sigma)
        self.bins = int(bins)
        self.edge_norm = edge_norm
        self.normal_mode = normal_mode
        self.min_influence = float(min_influence)
        self.boundary_reduction = boundary_reduction
        H, W = scene.crop
        self.H, self.W = H, W
        gh, gw, origin = padded_grid(H, W, pad)
        self.grid, self.origin = (gh, gw), origin
        self.mask = pad_mask(scene.gt_mask, pad)
        self.df = distance_field(self.mask)
        self.gt_px = scene.gt_vertices_px
        self.gt_joints_px = landmark_joints(self.gt_px, scene.landmarker)

    def init_params(self, seed: int, scale: float = 0.01) -> dict:
        rng = np.random.default_rng(seed)
        V = self.scene.topology.vertex_count
        return {
            "scores": scale * rng.standard_normal((self.H, self.W, V)),
            "logits": scale * rng.standard_normal((3, V, self.bins)),
            "visibility_logits": scale * rng.standard_normal(V),
        }

    def decode(self, params):
        sp, probs = localize_vertices(params["scores"], self.alpha)
        head = RegressionHead(params["logits"], params["visibility_logits"], self.H, self.W)
        reg, w = decode_regression(head)
        return fuse_predictions(sp, reg, w), probs, head

    def evaluate(self, params) -> FitState:
        scene, topo = self.scene, self.scene.topology
        S = params["scores"]
        state, probs, head = self.decode(params)
        w = state.visibility
        fused = state.fused_xyz
        V = topo.vertex_count
        n_ann = len(scene.annotations)

        # surface-correspondence losses, averaged over annotations
        bl_val, g_scores = 0.0, np.zeros_like(S)
        cons_val, g_sp = 0.0, np.zeros((V, 2))
        for ann in scene.annotations:
            c, r = ann.grid_pixel()
            ce = L.barycentric_cross_entropy(S[r, c], ann, topo)
            bl_val += ce.value / n_ann
            g_scores[r, c] += ce.grads["scores"] / n_ann
            idx = topo.faces[ann.bc.face]
            val, g = L.consistency_from_positions(state.sp_xy[idx], ann)
            cons_val += val / n_ann
            np.add.at(g_sp, idx, g / n_ann)

        comps = {
            "bl": L.LossValue(bl_val, {"scores": g_scores}),
            "cons": L.LossValue(cons_val, {"sp_xy": g_sp}),
            "vis": L.visibility_bce(w, scene.visibility_labels),
        }
        comps.update(L.geometric_losses(fused, self.gt_px, topo, self.edge_norm, self.normal_mode))
        comps["j"] = L.joint_localization_loss(fused, self.gt_joints_px, scene.landmarker, "3d")

        sil = render_soft_silhouette(fused[:, :2], w, topo, self.grid, self.sigma, self.origin,
                                     self.min_influence)
        sl = silhouette_loss(sil, self.mask, self.df)
        # a per-pixel mean keeps the boundary term on the same footing as the mean-squared L2 term
        bnd = sl.boundary.scaled(1.0 / self.mask.size) if self.boundary_reduction == "mean" else sl.boundary
        comps["sil_l2"], comps["sil_bnd"] = sl.l2, bnd
        total = L.total_loss(comps, self.weights)

        # chain rule back to the free parameters
        g = total.grads
        g_fused = g.get("pred", np.zeros((V, 3))).copy()
        g_w = g.get("visibility", np.zeros(V)).copy()
        if "silhouette" in g:
            gv2, gw2 = render_soft_silhouette_vjp(fused[:, :2], w, topo, self.grid, g["silhouette"],
                                                  self.sigma, self.origin, self.min_influence)
            g_fused[:, :2] += gv2
            g_w += gw2
        g_sp_f, g_reg, g_wf = fuse_vjp(state, g_fused)
        g_logits, g_vis_logits = decode_regression_vjp(head, g_reg, g_w + g_wf)
        g_sp_total = g_sp_f + g.get("sp_xy", 0.0)
        g_S = localize_vertices_vjp(probs, state.sp_xy, self.alpha, g_sp_total) + g.get("scores", 0.0)
        grads = {"scores": g_S, "logits": g_logits, "visibility_logits": g_vis_logits}
        return FitState(L.LossValue(total.value, grads), comps, state)

    def metrics(self, state) -> dict:
        from .metrics import pose_metrics
        from .mesh import ROOT_JOINT

        fused = state.fused_xyz
        pred_joints = landmark_joints(fused, self.scene.landmarker)
        pm = pose_metrics(pred_joints, self.gt_joints_px, fused, self.gt_px, ROOT_JOINT)
        diam = self.scene.bounding_diameter()
        err2d = np.linalg.norm(fused[:, :2] - self.gt_px[:, :2], axis=1)
        return {
            "mpjpe_px": pm["mpjpe"], "pa_mpjpe_px": pm["pa_mpjpe"], "pve_px": pm["pve"],
            "bounding_diameter_px": diam, "pa_mpjpe_rel": pm["pa_mpjpe"] / diam,
            "vertex_error_2d_px": float(err2d.mean()),
        }


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm and norm > max_norm:
        k = max_norm / norm
        return {n: g * k for n, g in grads.items()}, norm
    return grads, norm


def gradient_descent(problem: FitProblem, params: dict, lr: float, steps: int, clip: float = 10.0,
                     lr_scale: dict | None = None, callback=None):
    """Plain clipped gradient descent. Returns (params, loss trace of length steps + 1, last state)."""
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    scale = {n: 1.0 for n in PARAM_NAMES} | dict(lr_scale or {})
    trace = []
    state = None
    for step in range(steps + 1):
        state = problem.evaluate(params)
        if not np.isfinite(state.total.value):
            raise DivergedTraining(f"loss became {state.total.value} at step {step}")
        trace.append(state.total.value)
        if callback is not None:
            callback(step, state)
        if step == steps:
            break
        grads, _ = clip_by_global_norm(state.total.grads, clip)
        for n in PARAM_NAMES:
            params[n] -= lr * scale[n] * grads[n]
    return params, trace, state
