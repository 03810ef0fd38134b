"""Procedural ground truth: posed biped scenes under a weak-perspective camera.

Model frame matches the camera frame up to scale: x right, y down, z away
from the camera (metres). A front-facing triangle has a normal with negative z.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import mesh as meshlib
from .decode import HeatmapStack
from .errors import InvalidConfig, NoVisibleSurface
from .losses import INVISIBLE, VISIBLE, SurfaceAnnotation
from .mesh import BarycentricCoord, Landmarker, MeshTopology, landmark_joints
from .softras import hard_rasterize
from .tensorio import load_pgm, load_tensor, save_pgm, save_tensor

HEATMAP_STD = 1.5
UNIT_TO_MM = 1000.0


@dataclass(frozen=True)
class Camera:
    scale: float               # pixels per model unit
    principal: tuple           # (cx, cy) pixels
    root_depth: float = 0.0    # absolute depth of the depth root, pixels (given)

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidConfig("camera scale must be positive")
        object.__setattr__(self, "principal", tuple(float(c) for c in self.principal))

    def project(self, X, root_z: float = 0.0) -> np.ndarray:
        """Model points to pixels: XY scaled and offset, Z relative to ``root_z``."""
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        out[:, :2] = self.scale * X[:, :2] + np.asarray(self.principal)
        out[:, 2] = self.scale * (X[:, 2] - root_z)
        return out

    def unproject(self, px) -> np.ndarray:
        """Pixel-frame vertices back to model units (depth stays root-relative)."""
        px = np.asarray(px, dtype=float)
        out = np.empty_like(px)
        out[:, :2] = (px[:, :2] - np.asarray(self.principal)) / self.scale
        out[:, 2] = px[:, 2] / self.scale
        return out


@dataclass
class SceneConfig:
    H: int = 64
    W: int = 64
    pose_family: str = "bend"       # "bend" or "rest"
    n_annotations: int = 48
    margin: float = 6.0             # pixels kept free around the rest-fitted body
    pose_scale: float = 1.0         # multiplies every pose-parameter range
    crop_shift: tuple = (0.0, 0.0)  # body offset as a fraction of (W, H)
    heatmap_std: float = HEATMAP_STD

    def __post_init__(self):
        self.crop_shift = tuple(float(c) for c in self.crop_shift)
        if self.H < 8 or self.W < 8:
            raise InvalidConfig("crop must be at least 8x8")
        if self.pose_family not in ("bend", "rest"):
            raise InvalidConfig(f"unknown pose family {self.pose_family!r}")
        if self.n_annotations < 1:
            raise InvalidConfig("need at least one annotation")
        if not (0 <= self.margin and 2 * self.margin < min(self.H, self.W) - 2):
            raise InvalidConfig("margin leaves no room for the body")
        if self.heatmap_std <= 0 or self.pose_scale < 0:
            raise InvalidConfig("heatmap_std must be positive and pose_scale nonnegative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SceneConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class Scene:
    topology: MeshTopology
    landmarker: Landmarker
    gt_vertices_3d: np.ndarray
    camera: Camera
    unit_to_mm: float
    gt_vertices_px: np.ndarray
    annotations: list
    visibility_labels: np.ndarray
    gt_mask: np.ndarray
    gt_joints: np.ndarray
    gt_heatmaps: HeatmapStack
    seed: int
    config: SceneConfig = field(default_factory=SceneConfig)

    @property
    def crop(self) -> tuple[int, int]:
        return self.config.H, self.config.W

    @property
    def gt_joints_px(self) -> np.ndarray:
        return landmark_joints(self.gt_vertices_px, self.landmarker)

    def bounding_diameter(self) -> float:
        """Diameter (pixels) of the bounding sphere of the GT pixel-frame mesh."""
        p = self.gt_vertices_px
        return 2.0 * float(np.max(np.linalg.norm(p - 0.5 * (p.min(0) + p.max(0)), axis=1)))


# -- pose deformation --------------------------------------------------------

def _rot(axis: str, a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _progressive(points, pivot, weight, first: tuple, second: tuple) -> np.ndarray:
    """Rotate each point about ``pivot`` by angles scaled with its limb weight."""
    out = points.copy()
    for i in np.flatnonzero(weight > 0):
        R = _rot(first[0], first[1] * weight[i]) @ _rot(second[0], second[1] * weight[i])
        out[i] = pivot + R @ (points[i] - pivot)
    return out


POSE_RANGES = {
    "arm_raise": 0.7, "arm_curl": 1.6, "leg_spread": 0.3, "leg_kick": 0.8,
    "head_tilt": 0.3, "head_nod": 0.3, "yaw": 0.6, "pitch": 0.25, "roll": 0.25,
    "stretch": 0.08,
}


def sample_pose(rng: np.random.Generator, scale: float = 1.0) -> dict:
    names = ["l_raise", "l_curl", "r_raise", "r_curl", "l_spread", "l_kick", "r_spread",
             "r_kick", "head_tilt", "head_nod", "yaw", "pitch", "roll", "sx", "sy"]
    keys = ["arm_raise", "arm_curl", "arm_raise", "arm_curl", "leg_spread", "leg_kick",
            "leg_spread", "leg_kick", "head_tilt", "head_nod", "yaw", "pitch", "roll",
            "stretch", "stretch"]
    u = rng.uniform(-1.0, 1.0, size=len(names))
    return {n: float(scale * POSE_RANGES[k] * x) for n, k, x in zip(names, keys, u)}


def deform_biped(rest, pose: dict) -> np.ndarray:
    """Smoothly bend and stretch the biped template (model units)."""
    c = meshlib.CELL
    gx = rest[:, 0] / c + 4.0
    gy = rest[:, 1] / c + 5.0
    to_model = lambda g: np.array([(g[0] - 4.0) * c, (g[1] - 5.0) * c, 0.0])  # noqa: E731
    arm_row = (gy >= 2 - 1e-9) & (gy <= 3 + 1e-9)
    p = rest.copy()
    wl = np.where(arm_row & (gx < 2), (2 - gx) / 2, 0.0)
    wr = np.where(arm_row & (gx > 6), (gx - 6) / 2, 0.0)
    p = _progressive(p, to_model((2, 2.5)), wl, ("z", -pose["l_raise"]), ("y", pose["l_curl"]))
    p = _progressive(p, to_model((6, 2.5)), wr, ("z", pose["r_raise"]), ("y", -pose["r_curl"]))
    legs = gy > 6
    wll = np.where(legs & (gx <= 3), (gy - 6) / 4, 0.0)
    wrl = np.where(legs & (gx >= 5), (gy - 6) / 4, 0.0)
    p = _progressive(p, to_model((2.5, 6)), wll, ("z", pose["l_spread"]), ("x", pose["l_kick"]))
    p = _progressive(p, to_model((5.5, 6)), wrl, ("z", -pose["r_spread"]), ("x", pose["r_kick"]))
    wh = np.where(gy < 2, (2 - gy) / 2, 0.0)
    p = _progressive(p, to_model((4, 2)), wh, ("z", pose["head_tilt"]), ("x", pose["head_nod"]))
    p = p * np.array([1.0 + pose["sx"], 1.0 + pose["sy"], 1.0])
    R = _rot("y", pose["yaw"]) @ _rot("x", pose["pitch"]) @ _rot("z", pose["roll"])
    return p @ R.T


# -- visibility, masks, heatmaps ---------------------------------------------

def face_normals(X, faces) -> np.ndarray:
    return np.cross(X[faces[:, 1]] - X[faces[:, 0]], X[faces[:, 2]] - X[faces[:, 0]])


def front_facing(X, faces) -> np.ndarray:
    return face_normals(X, faces)[:, 2] < 0


def in_crop(px, H: int, W: int) -> np.ndarray:
    return (px[:, 0] >= 0) & (px[:, 0] <= W - 1) & (px[:, 1] >= 0) & (px[:, 1] <= H - 1)


def visibility_labels(X, px, topology: MeshTopology, H: int, W: int) -> np.ndarray:
    """Visible iff incident to a front-facing face and inside the crop."""
    front = front_facing(X, topology.faces)
    touched = np.zeros(topology.vertex_count, bool)
    touched[topology.faces[front].ravel()] = True
    return np.where(touched & in_crop(px, H, W), VISIBLE, INVISIBLE).astype(np.int64)


def weak_visibility_labels(scene: "Scene") -> np.ndarray:
    """Partial labels from annotations: annotated-face vertices visible, out-of-crop invisible."""
    from .losses import UNLABELED

    lab = np.full(scene.topology.vertex_count, UNLABELED, dtype=np.int64)
    H, W = scene.crop
    lab[~in_crop(scene.gt_vertices_px, H, W)] = INVISIBLE
    for ann in scene.annotations:
        lab[scene.topology.faces[ann.bc.face]] = VISIBLE
    return lab


def gt_heatmap_scores(px_xy, H: int, W: int, std: float = HEATMAP_STD) -> np.ndarray:
    """Log-Gaussian scores: softmax over pixels of each channel is a Gaussian at the vertex."""
    rows, cols = np.mgrid[0:H, 0:W]
    dx = cols[..., None] - px_xy[:, 0]
    dy = rows[..., None] - px_xy[:, 1]
    return -(dx * dx + dy * dy) / (2.0 * std * std)


def gt_mask(px, topology: MeshTopology, X, H: int, W: int) -> np.ndarray:
    front = front_facing(X, topology.faces)
    return hard_rasterize(px[:, :2], topology.faces[front], (H, W)).astype(np.uint8)


LR_CONFUSION = 0.2


def mirror_map(topology: MeshTopology, tol: float = 1e-9) -> np.ndarray:
    """Index of each vertex's left/right mirror image (x -> -x) on the rest template."""
    rest = topology.rest_positions
    flipped = rest * np.array([-1.0, 1.0, 1.0])
    d = np.linalg.norm(rest[None, :, :] - flipped[:, None, :], axis=2)
    idx = np.argmin(d, axis=1)
    if np.any(d[np.arange(len(idx)), idx] > tol):
        raise ValueError("template is not left/right symmetric")
    return idx


def gt_posterior(scene: "Scene", pixel, spread: float = HEATMAP_STD,
                 confusion: float = LR_CONFUSION, mirror=None) -> np.ndarray:
    """Vertex posterior at ``pixel`` derived from ground truth.

    A Gaussian kernel (std ``spread`` px) over visible projected vertices, with
    a ``confusion`` share of its mass moved to the mirror-image vertices to
    model left/right part swaps.
    """
    d2 = np.sum((scene.gt_vertices_px[:, :2] - np.asarray(pixel)) ** 2, axis=1)
    s = np.where(scene.visibility_labels == VISIBLE, -d2 / (2.0 * spread * spread), -np.inf)
    k = np.exp(s - s.max())
    k /= k.sum()
    mirror = mirror_map(scene.topology) if mirror is None else mirror
    q = (1.0 - confusion) * k
    np.add.at(q, mirror, confusion * k)
    return q


# -- annotation sampling -----------------------------------------------------

def _triangle_area_2d(p):
    a, b = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    return 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


def _covers(tri, pt):
    lam = meshlib.barycentric_2d(pt, tri[:, 0], tri[:, 1], tri[:, 2])
    return np.all(lam >= -1e-12, axis=1)


def sample_annotations(scene: "Scene", n: int, seed: int) -> list[SurfaceAnnotation]:
    """Area-uniform samples on unoccluded front-facing triangles inside the crop.

    Occlusion follows painter's order on mean face depth: a sample is dropped
    if a closer front-facing triangle covers its pixel.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    faces = scene.topology.faces
    px = scene.gt_vertices_px
    front = np.flatnonzero(front_facing(scene.gt_vertices_3d, faces))
    tri = px[faces][:, :, :2]
    area = _triangle_area_2d(tri[front])
    if len(front) == 0 or area.sum() <= 0:
        raise NoVisibleSurface("no front-facing surface to annotate")
    depth = px[faces][:, :, 2].mean(axis=1)
    probs = area / area.sum()
    H, W = scene.crop

    out, attempts = [], 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n:
            raise NoVisibleSurface("visible surface too small to place annotations")
        f = int(front[rng.choice(len(front), p=probs)])
        r1, r2 = rng.random(2)
        s = np.sqrt(r1)
        beta = np.array([1.0 - s, s * (1.0 - r2), s * r2])
        pt = beta @ tri[f]
        if not (0 <= pt[0] <= W - 1 and 0 <= pt[1] <= H - 1):
            continue
        closer = front[(depth[front] < depth[f]) & (front != f)]
        if len(closer) and _covers(tri[closer], pt).any():
            continue
        out.append(SurfaceAnnotation(tuple(pt), BarycentricCoord(f, tuple(beta))))
    return out


# -- scene generation --------------------------------------------------------

def _fit_camera(X, cfg: SceneConfig, rng, root_z: float) -> Camera:
    lo, hi = X[:, :2].min(axis=0), X[:, :2].max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    room = np.array([cfg.W - 1 - 2 * cfg.margin, cfg.H - 1 - 2 * cfg.margin])
    s = float(np.min(room / span) * rng.uniform(0.85, 1.0))
    centre = 0.5 * (lo + hi)
    target = np.array([(cfg.W - 1) / 2, (cfg.H - 1) / 2]) + np.asarray(cfg.crop_shift) * [cfg.W, cfg.H]
    principal = target - s * centre
    return Camera(s, tuple(principal), root_depth=float(s * (3.0 + root_z)))


def generate_scene(seed: int, config: SceneConfig | dict | None = None,
                   template: tuple[MeshTopology, Landmarker] | None = None) -> Scene:
    cfg = config if isinstance(config, SceneConfig) else SceneConfig.from_dict(config)
    topo, lm = template or meshlib.load_template()
    rng = np.random.default_rng(seed)
    if cfg.pose_family == "rest" or cfg.pose_scale == 0:
        X = topo.rest_positions.copy()
        rng.uniform(size=15)  # keep the stream aligned with the posed family
    else:
        X = deform_biped(topo.rest_positions, sample_pose(rng, cfg.pose_scale))
    joints = landmark_joints(X, lm)
    root_z = float(joints[meshlib.DEPTH_ROOT, 2])
    cam = _fit_camera(X, cfg, rng, root_z)
    px = cam.project(X, root_z)
    labels = visibility_labels(X, px, topo, cfg.H, cfg.W)
    heat = HeatmapStack(gt_heatmap_scores(px[:, :2], cfg.H, cfg.W, cfg.heatmap_std))
    scene = Scene(
        topology=topo, landmarker=lm, gt_vertices_3d=X, camera=cam, unit_to_mm=UNIT_TO_MM,
        gt_vertices_px=px, annotations=[], visibility_labels=labels,
        gt_mask=gt_mask(px, topo, X, cfg.H, cfg.W), gt_joints=joints, gt_heatmaps=heat,
        seed=int(seed), config=cfg,
    )
    ann_seed = int(rng.integers(0, 2**31 - 1))
    scene.annotations = sample_annotations(scene, cfg.n_annotations, ann_seed)
    return scene


# -- serialization -----------------------------------------------------------

def save_scene(scene: Scene, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meshlib.write_mesh(d / "template.mesh", scene.topology, scene.landmarker)
    save_tensor(d / "vertices_3d.mpt", scene.gt_vertices_3d)
    save_tensor(d / "vertices_px.mpt", scene.gt_vertices_px)
    save_tensor(d / "joints.mpt", scene.gt_joints)
    save_tensor(d / "heatmaps.mpt", scene.gt_heatmaps.scores)
    save_pgm(d / "mask.pgm", scene.gt_mask)
    meta = {
        "seed": scene.seed,
        "config": asdict(scene.config),
        "camera": {"scale": scene.camera.scale, "principal": list(scene.camera.principal),
                   "root_depth": scene.camera.root_depth},
        "unit_to_mm": scene.unit_to_mm,
        "annotations": [{"pixel": list(a.pixel), "face": a.bc.face, "weights": list(a.bc.weights)}
                        for a in scene.annotations],
        "visibility_labels": scene.visibility_labels.tolist(),
    }
    (d / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_scene(directory: str | os.PathLike) -> Scene:
    d = Path(directory)
    meta = json.loads((d / "scene.json").read_text())
    topo, lm = meshlib.read_mesh(d / "template.mesh")
    cfg = SceneConfig.from_dict(meta["config"])
    cam = Camera(meta["camera"]["scale"], tuple(meta["camera"]["principal"]),
                 meta["camera"]["root_depth"])
    anns = [SurfaceAnnotation(tuple(a["pixel"]), BarycentricCoord(a["face"], tuple(a["weights"])))
            for a in meta["annotations"]]
    return Scene(
        topology=topo, landmarker=lm, gt_vertices_3d=load_tensor(d / "vertices_3d.mpt"),
        camera=cam, unit_to_mm=meta["unit_to_mm"], gt_vertices_px=load_tensor(d / "vertices_px.mpt"),
        annotations=anns, visibility_labels=np.asarray(meta["visibility_labels"], dtype=np.int64),
        gt_mask=load_pgm(d / "mask.pgm"), gt_joints=load_tensor(d / "joints.mpt"),
        gt_heatmaps=HeatmapStack(load_tensor(d / "heatmaps.mpt")), seed=meta["seed"], config=cfg,
    )


# -- limb meshes for upsampler experiments -------------------------------------

LIMB_RADIUS = 0.06
LIMB_LENGTH = 0.5
UPSAMPLER_DIMS = ((3, 4), (5, 6), (8, 10))  # (around, along) -> 12, 30, 80 vertices


def limb_surface(n_around: int, n_along: int) -> tuple[np.ndarray, np.ndarray]:
    """Half-cylinder facing the camera: vertices and grid triangulation."""
    th = np.linspace(-np.pi / 2, np.pi / 2, n_around)
    t = np.linspace(0.0, 1.0, n_along)
    T, TH = np.meshgrid(t, th, indexing="ij")
    pts = np.column_stack([LIMB_RADIUS * np.sin(TH).ravel(), LIMB_LENGTH * T.ravel(),
                           -LIMB_RADIUS * np.cos(TH).ravel()])
    faces = []
    for i in range(n_along - 1):
        for j in range(n_around - 1):
            a, b = i * n_around + j, i * n_around + j + 1
            c, d = a + n_around, b + n_around
            faces += [(a, c, b), (b, c, d)]
    return pts, np.array(faces)


def deform_limb(points, params) -> np.ndarray:
    """Bend in-plane and out-of-plane, twist and scale, progressively along the limb."""
    bend, kick, twist, scale = params
    t = points[:, 1] / LIMB_LENGTH
    out = np.empty_like(points)
    for i, (p, ti) in enumerate(zip(points, t)):
        R = _rot("z", bend * ti) @ _rot("x", kick * ti) @ _rot("y", twist * ti)
        out[i] = R @ p
    return out * scale


def limb_landmarker(high_points, n_joints: int = 4) -> Landmarker:
    t = high_points[:, 1] / LIMB_LENGTH
    levels = np.unique(np.round(t, 9))
    m = np.zeros((n_joints, len(high_points)))
    for j, target in enumerate(np.linspace(0, 1, n_joints)):
        lvl = levels[np.argmin(np.abs(levels - target))]
        sel = np.abs(t - lvl) < 1e-9
        m[j, sel] = 1.0 / sel.sum()
    return Landmarker(m)


def upsampler_dataset(n: int, seed: int, dims=UPSAMPLER_DIMS, bend_range: float = 1.0):
    """``n`` deformed limbs at three resolutions, root-aligned on the low mesh base ring.

    Returns (samples, meshes, landmarker) where each sample is
    ``(low, mid, high, joints)``.
    """
    rng = np.random.default_rng(seed)
    meshes = [limb_surface(*d) for d in dims]
    lm = limb_landmarker(meshes[2][0])
    n_around_low = dims[0][0]
    samples = []
    for _ in range(n):
        params = (rng.uniform(-bend_range, bend_range), rng.uniform(-bend_range, bend_range),
                  rng.uniform(-0.5, 0.5) * bend_range, rng.uniform(0.9, 1.1))
        low, mid, high = (deform_limb(m[0], params) for m in meshes)
        root = low[:n_around_low].mean(axis=0)
        low, mid, high = low - root, mid - root, high - root
        samples.append((low, mid, high, lm.matrix @ high))
    return samples, meshes, lm
