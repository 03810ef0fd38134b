"""Template mesh representation, barycentric geometry, geodesics and landmarker.

Mesh text format, one record per line (``#`` starts a comment)::

    v x y z u v          # rest position and atlas UV
    f i j k              # 0-based vertex indices
    lm j w0 w1 ... wV-1  # landmarker row for joint j
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import (
    AtlasLengthMismatch,
    DegenerateFace,
    DisconnectedVertices,
    EmptyTopology,
    FormatError,
    IndexOutOfRange,
    InvalidBarycentric,
    ShapeMismatch,
)

BARY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class MeshTopology:
    faces: np.ndarray           # (F, 3) int
    edges: np.ndarray           # (E, 2) int, i < j, unique
    uv_atlas: np.ndarray        # (V, 2)
    rest_positions: np.ndarray  # (V, 3)
    face_adjacency: tuple       # per-vertex tuple of incident face ids

    @property
    def vertex_count(self) -> int:
        return len(self.uv_atlas)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        p = self.rest_positions
        return np.linalg.norm(p[self.edges[:, 1]] - p[self.edges[:, 0]], axis=1)

    @cached_property
    def geodesics(self) -> np.ndarray:
        """All-pairs graph geodesics on the rest pose, (V, V)."""
        return geodesic_matrix(self)


@dataclass(frozen=True)
class BarycentricCoord:
    face: int
    weights: tuple
    # set when the query fell outside every triangle and was snapped
    flagged: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (3,) or not np.all(np.isfinite(w)):
            raise InvalidBarycentric(f"need three finite weights, got {self.weights!r}")
        if np.any(w < -BARY_TOL) or abs(w.sum() - 1.0) > BARY_TOL:
            raise InvalidBarycentric(f"weights {tuple(w)} are not a convex combination")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))


@dataclass(frozen=True, eq=False)
class Landmarker:
    matrix: np.ndarray  # (J, V)
    names: tuple = field(default=())

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2:
            raise ShapeMismatch("landmarker matrix must be 2-D")
        if np.any(m < 0):
            raise ValueError("landmarker weights must be nonnegative")
        if len(m) and np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("landmarker rows must sum to 1")
        object.__setattr__(self, "matrix", m)

    @property
    def joint_count(self) -> int:
        return self.matrix.shape[0]


def build_topology(faces, vertex_count: int, uv_atlas, rest_positions) -> MeshTopology:
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    uv = np.asarray(uv_atlas, dtype=float)
    rest = np.asarray(rest_positions, dtype=float)
    V = int(vertex_count)
    if len(uv) != V:
        raise AtlasLengthMismatch(f"atlas has {len(uv)} entries for {V} vertices")
    if uv.size and (uv.shape[1] != 2 or np.any(uv < 0) or np.any(uv > 1)):
        raise AtlasLengthMismatch("atlas entries must be 2-D points in [0,1]^2")
    if rest.shape != (V, 3):
        raise ShapeMismatch(f"rest positions must be ({V}, 3), got {rest.shape}")
    if f.size and (f.min() < 0 or f.max() >= V):
        raise IndexOutOfRange("face index outside [0, V)")
    bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if np.any(bad):
        raise DegenerateFace(f"face {int(np.flatnonzero(bad)[0])} repeats a vertex")

    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    pairs.sort(axis=1)
    edges = np.unique(pairs, axis=0) if len(pairs) else np.zeros((0, 2), np.int64)

    adjacency = [[] for _ in range(V)]
    for fi, tri in enumerate(f):
        for v in tri:
            adjacency[v].append(fi)
    return MeshTopology(
        faces=f,
        edges=edges,
        uv_atlas=uv,
        rest_positions=rest,
        face_adjacency=tuple(tuple(a) for a in adjacency),
    )


def interpolate_on_face(topology: MeshTopology, bc: BarycentricCoord, attr) -> np.ndarray:
    """Barycentric combination of a per-vertex attribute over the face of ``bc``."""
    a = np.asarray(attr, dtype=float)
    if a.shape[0] != topology.vertex_count:
        raise ShapeMismatch(f"attribute has {a.shape[0]} rows, expected {topology.vertex_count}")
    if not 0 <= bc.face < topology.face_count:
        raise InvalidBarycentric(f"face {bc.face} out of range")
    idx = topology.faces[bc.face]
    w = np.asarray(bc.weights)
    return np.tensordot(w, a[idx], axes=1)


# -- triangle geometry -------------------------------------------------------

def barycentric_2d(p, a, b, c):
    """Unclamped barycentrics of 2-D point ``p`` w.r.t. triangle (a, b, c).

    Broadcasts over leading dimensions. Returns ``nan`` weights for zero-area
    triangles.
    """
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    v0, v1, v2 = b - a, c - a, p - a
    den = v0[..., 0] * v1[..., 1] - v1[..., 0] * v0[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (v2[..., 0] * v1[..., 1] - v1[..., 0] * v2[..., 1]) / den
        l2 = (v0[..., 0] * v2[..., 1] - v2[..., 0] * v0[..., 1]) / den
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def closest_point_on_triangle(p, a, b, c):
    """Barycentric weights of the point of triangle (a, b, c) closest to ``p``.

    Works in any dimension (Voronoi-region walk). Degenerate triangles fall
    back to the closest point over their three edges.
    """
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    g = (ab @ ab) * (ac @ ac)
    if g == 0 or g - (ab @ ac) ** 2 <= 1e-12 * g:
        return _closest_on_edges(p, a, b, c)
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        return np.array([1.0 - t, t, 0.0])
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        return np.array([1.0 - t, 0.0, t])
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.array([0.0, 1.0 - t, t])
    denom = va + vb + vc
    v, w = vb / denom, vc / denom
    return np.array([1.0 - v - w, v, w])


def _closest_on_edges(p, a, b, c):
    best, best_w = np.inf, None
    pts = (a, b, c)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        e = pts[j] - pts[i]
        ee = e @ e
        t = 0.0 if ee == 0 else float(np.clip((p - pts[i]) @ e / ee, 0.0, 1.0))
        d = np.sum((pts[i] + t * e - p) ** 2)
        if d < best:
            best = d
            best_w = np.zeros(3)
            best_w[i], best_w[j] = 1.0 - t, t
    return best_w


def uv_to_barycentric(topology: MeshTopology, u) -> BarycentricCoord:
    """Locate a UV point on the atlas; snaps to the nearest triangle (flagged) if outside."""
    if topology.face_count == 0:
        raise EmptyTopology("topology has no faces")
    u = np.asarray(u, dtype=float)
    tri = topology.uv_atlas[topology.faces]  # (F, 3, 2)
    lam = barycentric_2d(u, tri[:, 0], tri[:, 1], tri[:, 2])
    with np.errstate(invalid="ignore"):
        score = np.where(np.isnan(lam).any(axis=1), -np.inf, lam.min(axis=1))
    fi = int(np.argmax(score))
    if score[fi] >= -BARY_TOL:
        w = np.clip(lam[fi], 0.0, None)
        return BarycentricCoord(fi, tuple(w / w.sum()))

    best, best_f, best_w = np.inf, -1, None
    for f, (a, b, c) in enumerate(tri):
        w = closest_point_on_triangle(u, a, b, c)
        d = np.sum((w @ np.stack([a, b, c]) - u) ** 2)
        if d < best:
            best, best_f, best_w = d, f, w
    return BarycentricCoord(best_f, tuple(best_w), flagged=True)


# -- geodesics ---------------------------------------------------------------

def _edge_graph(topology: MeshTopology, positions=None) -> csr_matrix:
    p = topology.rest_positions if positions is None else np.asarray(positions, float)
    e = topology.edges
    w = np.linalg.norm(p[e[:, 1]] - p[e[:, 0]], axis=1)
    V = topology.vertex_count
    return csr_matrix((w, (e[:, 0], e[:, 1])), shape=(V, V))


def geodesic_distance(topology: MeshTopology, rest_positions, a: int, b: int) -> float:
    """Shortest-path length over the edge graph with Euclidean edge weights.

    This is a graph approximation of the surface geodesic; it overestimates
    paths that cut across faces.
    """
    V = topology.vertex_count
    if not (0 <= a < V and 0 <= b < V):
        raise IndexOutOfRange("vertex index out of range")
    if a == b:
        return 0.0
    d = dijkstra(_edge_graph(topology, rest_positions), directed=False, indices=a)
    if not np.isfinite(d[b]):
        raise DisconnectedVertices(f"vertices {a} and {b} are not connected")
    return float(d[b])


def geodesic_matrix(topology: MeshTopology, positions=None) -> np.ndarray:
    return dijkstra(_edge_graph(topology, positions), directed=False)


def landmark_joints(positions, lm: Landmarker) -> np.ndarray:
    p = np.asarray(positions, dtype=float)
    if p.ndim != 2 or p.shape[0] != lm.matrix.shape[1]:
        raise ShapeMismatch(
            f"positions {p.shape} incompatible with landmarker {lm.matrix.shape}"
        )
    return lm.matrix @ p


# -- file IO -----------------------------------------------------------------

def read_mesh(path: str | os.PathLike) -> tuple[MeshTopology, Landmarker]:
    verts, uvs, faces, rows = [], [], [], {}
    names = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if raw.strip().startswith("# joint"):
                # "# joint <j> <name>" keeps joint names readable in the file
                parts = raw.split()
                if len(parts) >= 4:
                    names[int(parts[2])] = parts[3]
            continue
        tok = line.split()
        try:
            if tok[0] == "v":
                x, y, z, u, v = map(float, tok[1:6])
                verts.append((x, y, z))
                uvs.append((u, v))
            elif tok[0] == "f":
                faces.append(tuple(int(t) for t in tok[1:4]))
            elif tok[0] == "lm":
                rows[int(tok[1])] = [float(t) for t in tok[2:]]
            else:
                raise FormatError(f"line {lineno}: unknown record {tok[0]!r}")
        except (ValueError, IndexError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    V = len(verts)
    topo = build_topology(faces, V, np.array(uvs).reshape(-1, 2), np.array(verts).reshape(-1, 3))
    J = len(rows)
    if sorted(rows) != list(range(J)):
        raise FormatError("landmarker rows must be numbered 0..J-1")
    mat = np.zeros((J, V))
    for j, w in rows.items():
        if len(w) != V:
            raise FormatError(f"landmarker row {j} has {len(w)} weights, expected {V}")
        mat[j] = w
    return topo, Landmarker(mat, tuple(names.get(j, f"j{j}") for j in range(J)))


def write_mesh(path: str | os.PathLike, topology: MeshTopology, lm: Landmarker | None = None) -> None:
    out = ["# mpk mesh: v x y z u v | f i j k | lm j w0..wV-1"]
    for p, uv in zip(topology.rest_positions, topology.uv_atlas):
        out.append("v " + " ".join(repr(float(x)) for x in (*p, *uv)))
    for f in topology.faces:
        out.append("f %d %d %d" % tuple(f))
    if lm is not None:
        for j, row in enumerate(lm.matrix):
            if lm.names:
                out.append(f"# joint {j} {lm.names[j]}")
            out.append(f"lm {j} " + " ".join(repr(float(w)) for w in row))
    Path(path).write_text("\n".join(out) + "\n")


# -- procedural template -----------------------------------------------------

CELL = 0.17  # metres per grid cell; 10 rows give a 1.7 m figure
BULGE = 0.08

# (col, row) grid cells covered by the biped, image axes (y down)
_BIPED_CELLS = (
    [(3, 0), (4, 0), (3, 1), (4, 1)]
    + [(c, 2) for c in range(8)]
    + [(c, r) for r in (3, 4, 5) for c in range(2, 6)]
    + [(c, r) for r in (6, 7, 8, 9) for c in (2, 5)]
)

# joint name -> grid location; each joint averages its nearest rest vertices
BIPED_JOINTS = (
    ("head", (4.0, 0.5)),
    ("neck", (4.0, 2.0)),
    ("sternum", (4.0, 3.0)),
    ("pelvis", (4.0, 6.0)),
    ("l_shoulder", (2.0, 2.5)),
    ("l_hand", (0.0, 2.5)),
    ("r_shoulder", (6.0, 2.5)),
    ("r_hand", (8.0, 2.5)),
    ("l_hip", (2.5, 6.0)),
    ("l_knee", (2.5, 8.0)),
    ("l_foot", (2.5, 10.0)),
    ("r_hip", (5.5, 6.0)),
    ("r_knee", (5.5, 8.0)),
    ("r_foot", (5.5, 10.0)),
)
ROOT_JOINT = 3    # pelvis: root for MPJPE alignment
DEPTH_ROOT = 2    # sternum: reference for relative depth


def build_biped_template(k_nearest: int = 3) -> tuple[MeshTopology, Landmarker]:
    """Grid-cell biped with a bulged torso and a planar single-chart UV atlas.

    The surface has disk topology so the UV map is a non-overlapping
    triangulation of the unit square.
    """
    cells = set(_BIPED_CELLS)
    corners = sorted({(c + dx, r + dy) for c, r in cells for dx in (0, 1) for dy in (0, 1)},
                     key=lambda t: (t[1], t[0]))
    index = {g: i for i, g in enumerate(corners)}
    grid = np.array(corners, dtype=float)

    faces = []
    for c, r in sorted(cells, key=lambda t: (t[1], t[0])):
        a, b = index[(c, r)], index[(c + 1, r)]
        d, e = index[(c, r + 1)], index[(c + 1, r + 1)]
        # alternate diagonals for left/right symmetry about x = 4
        if (c < 4) == ((c + r) % 2 == 0):
            faces += [(a, b, e), (a, e, d)]
        else:
            faces += [(a, b, d), (b, e, d)]
    faces = np.array(faces)

    # interior corners (all four neighbouring cells present) bulge towards camera
    depth = np.zeros(len(grid))
    for i, (x, y) in enumerate(corners):
        around = [(x - 1, y - 1), (x, y - 1), (x - 1, y), (x, y)]
        if all(cell in cells for cell in around):
            depth[i] = BULGE
    rest = np.column_stack([(grid[:, 0] - 4.0) * CELL, (grid[:, 1] - 5.0) * CELL,
                            np.where(depth > 0, -depth, 0.0)])

    # camera looks along +z with image y down: front faces need normal z < 0
    p = rest
    n = np.cross(p[faces[:, 1]] - p[faces[:, 0]], p[faces[:, 2]] - p[faces[:, 0]])
    flip = n[:, 2] > 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    uv = np.column_stack([grid[:, 0] / 8.0, grid[:, 1] / 10.0])
    topo = build_topology(faces, len(grid), uv, rest)

    mat = np.zeros((len(BIPED_JOINTS), len(grid)))
    for j, (_, loc) in enumerate(BIPED_JOINTS):
        d = np.linalg.norm(grid - np.asarray(loc), axis=1)
        order = np.lexsort((np.arange(len(d)), np.round(d, 9)))
        mat[j, order[:k_nearest]] = 1.0 / k_nearest
    return topo, Landmarker(mat, tuple(name for name, _ in BIPED_JOINTS))


TEMPLATE_PATH = Path(__file__).with_name("data") / "biped.mesh"


def load_template(path: str | os.PathLike | None = None) -> tuple[MeshTopology, Landmarker]:
    return read_mesh(TEMPLATE_PATH if path is None else path)
