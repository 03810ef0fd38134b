"""Two-stage linear low->mid->high mesh upsampler, noisy training, nearest-face baseline."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DivergedTraining, EmptyDataset, InvalidConfig, ShapeMismatch, UnboundVertex
from .mesh import Landmarker, closest_point_on_triangle
from .tensorio import load_tensor, save_tensor


@dataclass(frozen=True, eq=False)
class UpsamplerParams:
    A1: np.ndarray  # (V_mid, V_low)
    b1: np.ndarray  # (V_mid, 3)
    A2: np.ndarray  # (V_high, V_mid)
    b2: np.ndarray  # (V_high, 3)

    def __post_init__(self):
        vm, vl = np.shape(self.A1)
        vh, vm2 = np.shape(self.A2)
        if vm2 != vm or np.shape(self.b1) != (vm, 3) or np.shape(self.b2) != (vh, 3):
            raise ShapeMismatch("upsampler parameter shapes are inconsistent")
        for a in (self.A1, self.b1, self.A2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("upsampler parameters must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.A1.shape[1], self.A1.shape[0], self.A2.shape[0]

    @classmethod
    def zeros(cls, dims) -> "UpsamplerParams":
        vl, vm, vh = dims
        return cls(np.zeros((vm, vl)), np.zeros((vm, 3)), np.zeros((vh, vm)), np.zeros((vh, 3)))

    @classmethod
    def random(cls, dims, seed: int = 0) -> "UpsamplerParams":
        vl, vm, vh = dims
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, 1 / np.sqrt(vl), (vm, vl)), np.zeros((vm, 3)),
                   rng.normal(0, 1 / np.sqrt(vm), (vh, vm)), np.zeros((vh, 3)))

    def copy(self) -> "UpsamplerParams":
        return UpsamplerParams(self.A1.copy(), self.b1.copy(), self.A2.copy(), self.b2.copy())


def upsample(low, params: UpsamplerParams) -> dict[str, np.ndarray]:
    """``mid = A1 low + b1``, ``high = A2 mid + b2``; ``low`` may carry a leading batch axis."""
    x = np.asarray(low, dtype=float)
    if x.shape[-2:] != (params.A1.shape[1], 3):
        raise ShapeMismatch(f"low mesh {x.shape} does not match V_low={params.A1.shape[1]}")
    mid = np.matmul(params.A1, x) + params.b1
    high = np.matmul(params.A2, mid) + params.b2
    return {"mid": mid, "high": high}


# -- noise -----------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    spike_prob: float = 0.5
    spike_fraction: float = 0.25
    spike_scale: float = 0.15
    gauss_std: float = 0.05
    mode: str = "multiplicative"  # or "additive"

    def __post_init__(self):
        if not (0 <= self.spike_prob <= 1 and 0 <= self.spike_fraction <= 1):
            raise InvalidConfig("noise probabilities must lie in [0, 1]")
        if self.spike_scale < 0 or self.gauss_std < 0:
            raise InvalidConfig("noise magnitudes must be nonnegative")
        if self.mode not in ("multiplicative", "additive"):
            raise InvalidConfig(f"unknown noise mode {self.mode!r}")


def root_align(mesh, root) -> np.ndarray:
    """Translate so that ``root`` (a vertex index or a 3-vector) sits at the origin."""
    m = np.asarray(mesh, dtype=float)
    r = m[root] if np.ndim(root) == 0 else np.asarray(root, dtype=float)
    return m - r


def spike_subset(V: int, fraction: float, rng) -> np.ndarray:
    return rng.choice(V, size=int(round(fraction * V)), replace=False)


def apply_noise(low, cfg: NoiseConfig, rng) -> np.ndarray:
    """Perturb a root-aligned mesh: spikes on a vertex subset, otherwise scaled Gaussian noise.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng)
    x = np.asarray(low, dtype=float)
    out = x.copy()
    if rng.random() < cfg.spike_prob:
        idx = spike_subset(len(x), cfg.spike_fraction, rng)
        sign = rng.choice([-1.0, 1.0], size=(len(idx), 3))
        if cfg.mode == "multiplicative":
            out[idx] = x[idx] * (1.0 + sign * cfg.spike_scale)
        else:
            mag = np.linalg.norm(x[idx], axis=1, keepdims=True)
            out[idx] = x[idx] + sign * cfg.spike_scale * mag
    else:
        mag = np.linalg.norm(x, axis=1, keepdims=True)
        out = x + rng.normal(size=x.shape) * cfg.gauss_std * mag
    return out


# -- training ----------------------------------------------------------------

def _stack(dataset):
    lows, mids, highs, joints = (np.stack([np.asarray(s[i], float) for s in dataset]) for i in range(4))
    return lows, mids, highs, joints


def upsampler_loss(params: UpsamplerParams, low, mid_gt, high_gt, joints_gt, lm: Landmarker):
    """Mean-L1 at mid, high and landmarked joints, with parameter gradients."""
    out = upsample(low, params)
    mid, high = out["mid"], out["high"]
    joints = np.matmul(lm.matrix, high)
    dm, dh, dj = mid - mid_gt, high - high_gt, joints - joints_gt
    loss = np.abs(dm).mean() + np.abs(dh).mean() + np.abs(dj).mean()
    g_high = np.sign(dh) / dh.size + np.matmul(lm.matrix.T, np.sign(dj) / dj.size)
    g_mid = np.sign(dm) / dm.size + np.matmul(params.A2.T, g_high)
    grads = UpsamplerParams(
        np.einsum("nmc,nlc->ml", g_mid, low), g_mid.sum(axis=0),
        np.einsum("nhc,nmc->hm", g_high, mid), g_high.sum(axis=0),
    )
    return float(loss), grads


def train_upsampler(dataset, lm: Landmarker, noise: NoiseConfig | None = NoiseConfig(),
                    epochs: int = 500, lr: float = 1e-2, seed: int = 0,
                    init: UpsamplerParams | None = None, momentum: float = 0.0,
                    schedule: str = "constant"):
    """Full-batch gradient descent on the L1 objective.

    Inputs are re-noised every epoch when ``noise`` is given. ``schedule`` is
    ``"constant"`` or ``"cosine"`` (lr annealed to zero). Returns
    ``(params, losses)`` where ``losses`` holds one entry per epoch plus the
    final clean-input loss.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no training samples")
    if schedule not in ("constant", "cosine"):
        raise InvalidConfig(f"unknown schedule {schedule!r}")
    lows, mids, highs, joints = _stack(dataset)
    dims = (lows.shape[1], mids.shape[1], highs.shape[1])
    rng = np.random.default_rng(seed)
    params = (init or UpsamplerParams.random(dims, int(rng.integers(2**31)))).copy()
    vel = [np.zeros_like(a) for a in (params.A1, params.b1, params.A2, params.b2)]
    losses = []
    for ep in range(epochs):
        x = lows if noise is None else np.stack([apply_noise(l, noise, rng) for l in lows])
        loss, g = upsampler_loss(params, x, mids, highs, joints, lm)
        if not np.isfinite(loss):
            raise DivergedTraining(f"loss became {loss} at epoch {ep}")
        losses.append(loss)
        step = lr if schedule == "constant" else 0.5 * lr * (1.0 + np.cos(np.pi * ep / epochs))
        arrays = [params.A1, params.b1, params.A2, params.b2]
        for a, v, ga in zip(arrays, vel, (g.A1, g.b1, g.A2, g.b2)):
            v *= momentum
            v += ga
            a -= step * v
    final, _ = upsampler_loss(params, lows, mids, highs, joints, lm)
    if not np.isfinite(final):
        raise DivergedTraining("final loss is not finite")
    losses.append(final)
    return params, losses


def evaluate_l1(params: UpsamplerParams, dataset, noise: NoiseConfig | None = None, seed: int = 0) -> float:
    """Mean absolute high-poly error, optionally on noised inputs."""
    lows, _, highs, _ = _stack(dataset)
    if noise is not None:
        rng = np.random.default_rng(seed)
        lows = np.stack([apply_noise(l, noise, rng) for l in lows])
    return float(np.abs(upsample(lows, params)["high"] - highs).mean())


# -- nearest-face baseline -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NearestBindings:
    faces: np.ndarray    # (V_high,) bound low face, -1 if unbound
    weights: np.ndarray  # (V_high, 3) barycentrics of the closest point
    offsets: np.ndarray  # (V_high, 3) residual in the face frame (edge, in-plane normal, normal)


def _face_frames(low, faces):
    p = np.asarray(low, float)[faces]
    e = p[:, 1] - p[:, 0]
    n = np.cross(e, p[:, 2] - p[:, 0])
    t1 = e / np.linalg.norm(e, axis=1, keepdims=True)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=1)  # rows are frame axes


def build_bindings(low_rest, low_faces, high_rest) -> NearestBindings:
    """Bind every high vertex to the closest point on the rest low mesh."""
    low_rest = np.asarray(low_rest, float)
    faces = np.asarray(low_faces)
    high_rest = np.asarray(high_rest, float)
    tri = low_rest[faces]
    frames = _face_frames(low_rest, faces)
    fid = np.empty(len(high_rest), dtype=np.int64)
    w = np.empty((len(high_rest), 3))
    off = np.empty((len(high_rest), 3))
    for i, h in enumerate(high_rest):
        lam = np.array([closest_point_on_triangle(h, *t) for t in tri])
        q = np.einsum("fk,fkc->fc", lam, tri)
        f = int(np.argmin(np.linalg.norm(q - h, axis=1)))
        fid[i], w[i] = f, lam[f]
        off[i] = frames[f] @ (h - q[f])
    return NearestBindings(fid, w, off)


def nearest_upsample(low, low_faces, bindings: NearestBindings) -> np.ndarray:
    faces = np.asarray(low_faces)
    if np.any(bindings.faces < 0) or np.any(bindings.faces >= len(faces)):
        raise UnboundVertex("every high vertex needs a valid low face binding")
    low = np.asarray(low, float)
    frames = _face_frames(low, faces)[bindings.faces]
    base = np.einsum("hk,hkc->hc", bindings.weights, low[faces[bindings.faces]])
    return base + np.einsum("hk,hkc->hc", bindings.offsets, frames)


# -- serialization -----------------------------------------------------------

def save_params(params: UpsamplerParams, directory: str | os.PathLike, extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("A1", "b1", "A2", "b2"):
        save_tensor(d / f"{name}.mpt", getattr(params, name))
    meta = {"dims": list(params.dims), **(extra or {})}
    (d / "params.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_params(directory: str | os.PathLike) -> UpsamplerParams:
    d = Path(directory)
    meta = json.loads((d / "params.json").read_text())
    p = UpsamplerParams(*(load_tensor(d / f"{n}.mpt") for n in ("A1", "b1", "A2", "b2")))
    if list(p.dims) != list(meta["dims"]):
        raise ShapeMismatch("sidecar dims disagree with tensors")
    return p


def noise_config_dict(cfg: NoiseConfig) -> dict:
    return asdict(cfg)
