"""Visibility-weighted soft silhouette rasterizer and its supervision losses.

The per-pixel aggregate is ``I = 1 - prod_j (1 - w_j D_j)`` where ``D_j`` is
the sigmoid edge influence of face ``j`` and ``w_j`` the face's vertex
visibilities interpolated at the pixel (clamped to the triangle outside it).

Coordinates are pixels. ``sigma`` is in pixels squared (default 1.0). A
render grid may be larger than the input crop; ``origin`` gives the pixel
coordinate of grid cell ``[0, 0]``.

The hot loop runs in a compiled extension when available; set
``MPK_SOFTRAS_BACKEND=python`` to force the numpy fallback.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt

from ..errors import DegenerateTriangleWarning, ShapeMismatch, VisibilityOutOfRange
from ..losses import LossValue
from . import _reference

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

DEFAULT_SIGMA = 1.0
DEFAULT_MIN_INFLUENCE = 1e-6
DEFAULT_PAD = 0.5


def _select_backend(name: str | None = None):
    name = (name or os.environ.get("MPK_SOFTRAS_BACKEND", "auto")).lower()
    if name == "python":
        return "python", _reference
    if name in ("cython", "compiled"):
        if _compiled is None:
            raise ImportError("compiled softras kernel is not built")
        return "cython", _compiled
    if name != "auto":
        raise ValueError(f"unknown softras backend {name!r}")
    return ("cython", _compiled) if _compiled is not None else ("python", _reference)


BACKEND, _kernel = _select_backend()


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


def _kernel_for(backend):
    return _kernel if backend is None else _select_backend(backend)[1]


# -- single face influence -------------------------------------------------------

def face_influence(face_2d, pixel, sigma: float = DEFAULT_SIGMA) -> float:
    """Sigmoid of the signed squared distance from ``pixel`` to the triangle boundary."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    p = np.asarray(face_2d, dtype=float).reshape(3, 2)
    P = np.asarray(pixel, dtype=float).reshape(1, 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        den, _, _, inside, d2, _, _ = _reference._face_terms(p, P)
    if abs(den) < _reference.DEGENERATE_AREA:
        warnings.warn("zero-area triangle has no influence", DegenerateTriangleWarning, stacklevel=2)
        return 0.0
    z = (d2 if inside[0] else -d2) / sigma
    return float(_reference._sigmoid(np.atleast_1d(z))[0])


# -- rendering ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SoftSilhouette:
    image: np.ndarray
    sigma: float
    origin: tuple = (0.0, 0.0)
    degenerate_faces: tuple = field(default=())


def padded_grid(H: int, W: int, pad: float = DEFAULT_PAD):
    """Render grid enlarged by ``pad`` of the crop on each side: ``(H', W', origin)``."""
    ph, pw = int(round(pad * H)), int(round(pad * W))
    return H + 2 * ph, W + 2 * pw, (-float(pw), -float(ph))


def pad_mask(mask, pad: float = DEFAULT_PAD) -> np.ndarray:
    m = np.asarray(mask)
    H, W = m.shape
    ph, pw = int(round(pad * H)), int(round(pad * W))
    return np.pad(m, ((ph, ph), (pw, pw)))


def _prepare(vertices_2d, visibility, topology, grid):
    v = np.asarray(vertices_2d, dtype=float)
    w = np.asarray(visibility, dtype=float)
    V = topology.vertex_count
    if v.shape != (V, 2) or w.shape != (V,):
        raise ShapeMismatch(f"expected ({V}, 2) vertices and ({V},) visibility")
    if np.any(w < 0) or np.any(w > 1):
        raise VisibilityOutOfRange("visibility must lie in [0, 1]")
    H, W = (int(g) for g in grid)
    return v, w, H, W


def degenerate_faces(vertices_2d, faces) -> tuple:
    p = np.asarray(vertices_2d)[faces]
    den = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - \
          (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    return tuple(int(i) for i in np.flatnonzero(np.abs(den) < _reference.DEGENERATE_AREA))


def render_soft_silhouette(vertices_2d, visibility, topology, grid, sigma: float = DEFAULT_SIGMA,
                           origin=(0.0, 0.0), min_influence: float = DEFAULT_MIN_INFLUENCE,
                           backend: str | None = None) -> SoftSilhouette:
    v, w, H, W = _prepare(vertices_2d, visibility, topology, grid)
    img = _kernel_for(backend).forward(v, w, topology.faces, H, W, float(origin[0]),
                                       float(origin[1]), float(sigma), float(min_influence))
    return SoftSilhouette(np.clip(img, 0.0, 1.0), float(sigma), tuple(origin),
                          degenerate_faces(v, topology.faces))


def render_soft_silhouette_vjp(vertices_2d, visibility, topology, grid, grad_image,
                               sigma: float = DEFAULT_SIGMA, origin=(0.0, 0.0),
                               min_influence: float = DEFAULT_MIN_INFLUENCE,
                               backend: str | None = None):
    """Gradient of ``sum(grad_image * I)`` w.r.t. ``(vertices_2d, visibility)``."""
    v, w, H, W = _prepare(vertices_2d, visibility, topology, grid)
    g = np.asarray(grad_image, dtype=float)
    if g.shape != (H, W):
        raise ShapeMismatch("grad_image must match the render grid")
    return _kernel_for(backend).backward(v, w, topology.faces, H, W, float(origin[0]),
                                         float(origin[1]), float(sigma), float(min_influence), g)


def hard_rasterize(vertices_2d, faces, grid, origin=(0.0, 0.0)) -> np.ndarray:
    """Pixels whose centre lies inside (or on) any projected triangle."""
    H, W = grid
    rr, cc = np.mgrid[0:H, 0:W]
    P = np.column_stack([cc.ravel() + origin[0], rr.ravel() + origin[1]]).astype(float)
    out = np.zeros(H * W, dtype=bool)
    v = np.asarray(vertices_2d, dtype=float)
    for f in np.asarray(faces):
        p = v[f]
        den, _, lam, inside, _, _, _ = _reference._face_terms(p, P)
        if abs(den) >= _reference.DEGENERATE_AREA:
            out |= inside
    return out.reshape(H, W)


# -- distance field and losses -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class DistanceField:
    values: np.ndarray
    mask: np.ndarray


def distance_field(mask) -> DistanceField:
    """Distance to the nearest boundary pixel plus one inside the mask; zero outside.

    Boundary pixels are mask pixels 4-adjacent to background or the grid border.
    """
    m = np.asarray(mask) > 0
    if not m.any():
        return DistanceField(np.zeros(m.shape), m)
    interior = binary_erosion(m, border_value=0)  # default structure is 4-connected
    boundary = m & ~interior
    dist = distance_transform_edt(~boundary)
    return DistanceField(np.where(m, dist + 1.0, 0.0), m)


@dataclass
class SilhouetteLoss:
    l2: LossValue        # mean squared error to the GT mask
    boundary: LossValue  # -sum(D * I)
    combined: LossValue


def silhouette_loss(I_s, gt_mask, df: DistanceField, w_l2: float = 100.0,
                    w_boundary: float = 1.0) -> SilhouetteLoss:
    img = I_s.image if isinstance(I_s, SoftSilhouette) else np.asarray(I_s, dtype=float)
    gt = np.asarray(gt_mask, dtype=float)
    D = np.asarray(df.values, dtype=float)
    if img.shape != gt.shape or img.shape != D.shape:
        raise ShapeMismatch(f"silhouette {img.shape}, mask {gt.shape}, field {D.shape}")
    diff = img - gt
    N = img.size
    l2 = LossValue(float(np.sum(diff * diff) / N), {"silhouette": 2.0 * diff / N})
    bnd = LossValue(-float(np.sum(D * img)), {"silhouette": -D})
    combined = LossValue(w_l2 * l2.value + w_boundary * bnd.value,
                         {"silhouette": w_l2 * l2.grads["silhouette"] + w_boundary * bnd.grads["silhouette"]})
    return SilhouetteLoss(l2, bnd, combined)
