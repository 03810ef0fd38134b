"""Forward decoding: heatmap argsoftmax, per-pixel UV, 1-D bin regression, fusion.

Pixel convention: ``(x, y) = (column, row)``, pixel centres at integers,
origin at the top-left pixel.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import EmptyTopology, NonFiniteInput, ShapeMismatch, VisibilityOutOfRange
from .mesh import MeshTopology

DEFAULT_ALPHA = 1.0
DEFAULT_BINS = 64


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("input contains NaN or infinite values")


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    scores: np.ndarray  # (H, W, V)
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 3:
            raise ShapeMismatch("heatmap stack must be (H, W, V)")
        _check_finite(s)
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        object.__setattr__(self, "scores", s)

    @property
    def shape(self):
        return self.scores.shape

    def localize(self) -> np.ndarray:
        return localize_vertices(self.scores, self.alpha)[0]


# -- 2-D argsoftmax ----------------------------------------------------------

def pixel_grid(H: int, W: int):
    """Column and row coordinate arrays of shape (H, W)."""
    rows, cols = np.mgrid[0:H, 0:W]
    return cols.astype(float), rows.astype(float)


def argsoftmax2d(heatmap, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Expected (x, y) pixel position under softmax(alpha * heatmap)."""
    h = np.asarray(heatmap, dtype=float)
    _check_finite(h)
    if h.ndim != 2:
        raise ShapeMismatch("heatmap must be 2-D")
    p = softmax(alpha * h, axis=None)
    xs, ys = pixel_grid(*h.shape)
    return np.array([np.sum(p * xs), np.sum(p * ys)])


def localize_vertices(scores, alpha: float = DEFAULT_ALPHA):
    """Argsoftmax of every channel of an (H, W, V) stack.

    Returns ``(xy, probs)`` with ``xy`` of shape (V, 2) and the per-channel
    spatial distributions ``probs`` (H, W, V), which the backward pass reuses.
    """
    s = np.asarray(scores, dtype=float)
    _check_finite(s)
    H, W, V = s.shape
    p = softmax(alpha * s.reshape(H * W, V), axis=0).reshape(H, W, V)
    xs, ys = pixel_grid(H, W)
    xy = np.stack([np.einsum("hwv,hw->v", p, xs), np.einsum("hwv,hw->v", p, ys)], axis=1)
    return xy, p


def localize_vertices_vjp(probs, xy, alpha: float, grad_xy) -> np.ndarray:
    """Pull a (V, 2) gradient on vertex positions back to the scores.

    d x_v / d S_v[r, c] = alpha * P_v[r, c] * (grid[r, c] - x_v)
    """
    H, W, _ = probs.shape
    xs, ys = pixel_grid(H, W)
    g = np.asarray(grad_xy, dtype=float)
    proj = (xs[..., None] - xy[:, 0]) * g[:, 0] + (ys[..., None] - xy[:, 1]) * g[:, 1]
    return alpha * probs * proj


# -- per-pixel posterior and UV decoding -------------------------------------

def pixel_posterior(scores_at_pixel) -> np.ndarray:
    s = np.asarray(scores_at_pixel, dtype=float)
    _check_finite(s)
    return softmax(s)


def pixel_log_posterior(scores_at_pixel) -> np.ndarray:
    s = np.asarray(scores_at_pixel, dtype=float)
    _check_finite(s)
    return log_softmax(s)


class UVStrategy(str, Enum):
    BARYCENTRIC = "barycentric"
    NEAREST = "nearest"
    GLOBAL_AVERAGE = "global_average"


def best_face(q, topology: MeshTopology) -> int:
    """Face with the largest summed posterior; ties go to the lowest index."""
    return int(np.argmax(np.asarray(q)[topology.faces].sum(axis=1)))


def decode_uv(q, topology: MeshTopology, strategy=UVStrategy.BARYCENTRIC) -> np.ndarray:
    if topology.face_count == 0 or topology.vertex_count == 0:
        raise EmptyTopology("cannot decode UV on an empty topology")
    q = np.asarray(q, dtype=float)
    strategy = UVStrategy(strategy)
    uv = topology.uv_atlas
    if strategy is UVStrategy.NEAREST:
        return uv[int(np.argmax(q))].copy()
    if strategy is UVStrategy.GLOBAL_AVERAGE:
        return (q / q.sum()) @ uv
    f = topology.faces[best_face(q, topology)]
    beta = q[f] / q[f].sum()
    return beta @ uv[f]


# -- regression branch -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegressionHead:
    logits: np.ndarray             # (3, V, B): X, Y, Z bin logits
    visibility_logits: np.ndarray  # (V,)
    H: int
    W: int

    def __post_init__(self):
        lg = np.asarray(self.logits, dtype=float)
        vl = np.asarray(self.visibility_logits, dtype=float)
        if lg.ndim != 3 or lg.shape[0] != 3:
            raise ShapeMismatch("logits must be (3, V, B)")
        if lg.shape[2] < 2:
            raise ValueError("need at least two bins")
        if vl.shape != (lg.shape[1],):
            raise ShapeMismatch("visibility logits must be (V,)")
        _check_finite(lg, vl)
        object.__setattr__(self, "logits", lg)
        object.__setattr__(self, "visibility_logits", vl)

    @property
    def bin_count(self) -> int:
        return self.logits.shape[2]


def bin_positions(B: int) -> np.ndarray:
    """Bin coordinates spanning [0, B] inclusive, so endpoint bins decode exactly."""
    return np.linspace(0.0, float(B), B)


def axis_ranges(H: int, W: int) -> np.ndarray:
    """Pixel ranges that [0, B] maps onto for X, Y and Z."""
    return np.array([[-W, 2 * W], [-H, 3 * H], [-2 * W, 2 * W]], dtype=float)


def range_map(b, lo: float, hi: float, B: int):
    return lo + (hi - lo) * (np.asarray(b, dtype=float) / B)


def argsoftmax1d(logits) -> tuple[np.ndarray, np.ndarray]:
    """Expected bin coordinate along the last axis; also returns the softmax."""
    lg = np.asarray(logits, dtype=float)
    p = softmax(lg, axis=-1)
    return p @ bin_positions(lg.shape[-1]), p


def decode_regression(head: RegressionHead):
    """Returns ``(reg_xyz (V, 3) pixels, visibility (V,))``."""
    B = head.bin_count
    b, _ = argsoftmax1d(head.logits)  # (3, V)
    ranges = axis_ranges(head.H, head.W)
    xyz = np.stack([range_map(b[k], *ranges[k], B) for k in range(3)], axis=1)
    return xyz, expit(head.visibility_logits)


def decode_regression_vjp(head: RegressionHead, grad_xyz, grad_visibility):
    """Gradients of a scalar w.r.t. the head's logits and visibility logits."""
    B = head.bin_count
    b, p = argsoftmax1d(head.logits)
    ranges = axis_ranges(head.H, head.W)
    scale = (ranges[:, 1] - ranges[:, 0]) / B  # (3,)
    g = np.asarray(grad_xyz, dtype=float).T * scale[:, None]  # (3, V)
    pos = bin_positions(B)
    grad_logits = p * (pos[None, None, :] - b[..., None]) * g[..., None]
    w = expit(head.visibility_logits)
    grad_vis_logits = np.asarray(grad_visibility, dtype=float) * w * (1.0 - w)
    return grad_logits, grad_vis_logits


# -- fusion ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VertexState:
    sp_xy: np.ndarray       # (V, 2) heatmap-decoded pixels
    reg_xyz: np.ndarray     # (V, 3) regressed pixels
    visibility: np.ndarray  # (V,) in [0, 1]
    fused_xyz: np.ndarray   # (V, 3)


def fuse_predictions(sp_xy, reg_xyz, visibility) -> VertexState:
    """Visibility-weighted XY blend of heatmap and regressed vertices; Z from regression."""
    sp = np.asarray(sp_xy, dtype=float)
    reg = np.asarray(reg_xyz, dtype=float)
    w = np.asarray(visibility, dtype=float)
    V = len(w)
    if sp.shape != (V, 2) or reg.shape != (V, 3) or w.ndim != 1:
        raise ShapeMismatch(f"inconsistent shapes {sp.shape}, {reg.shape}, {w.shape}")
    if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
        raise VisibilityOutOfRange("visibility must lie in [0, 1]")
    fused = np.empty((V, 3))
    fused[:, :2] = sp * w[:, None] + reg[:, :2] * (1.0 - w[:, None])
    fused[:, 2] = reg[:, 2]
    return VertexState(sp, reg, w, fused)


def fuse_vjp(state: VertexState, grad_fused):
    """Returns gradients w.r.t. (sp_xy, reg_xyz, visibility)."""
    g = np.asarray(grad_fused, dtype=float)
    w = state.visibility[:, None]
    g_sp = g[:, :2] * w
    g_reg = np.empty_like(state.reg_xyz)
    g_reg[:, :2] = g[:, :2] * (1.0 - w)
    g_reg[:, 2] = g[:, 2]
    g_w = np.sum(g[:, :2] * (state.sp_xy - state.reg_xyz[:, :2]), axis=1)
    return g_sp, g_reg, g_w
