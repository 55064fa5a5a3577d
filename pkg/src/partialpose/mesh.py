"""Triangle meshes with vertex colours: primitives, sampling and file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .geom import Pose, icosphere


class MeshIngestError(ValueError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) meters
    faces: np.ndarray  # (M, 3) int
    colors: np.ndarray | None = None  # (N, 3) in [0, 1]

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        c = self.colors
        if c is None:
            c = np.full((len(v), 3), 0.5)
        c = np.clip(np.ascontiguousarray(c, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
        if len(c) != len(v):
            raise ValueError("colors must have one row per vertex")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face references a missing vertex")
        for a in (v, f, c):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "colors", c)

    def __len__(self):
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.faces) == 0

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.faces, self.colors)

    def scaled(self, factor: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * float(factor), self.faces, self.colors)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.bounds
        return (lo + hi) / 2.0

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalize:
            length = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(length > 0, length, 1.0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def vertex_areas(self) -> np.ndarray:
        """Barycentric dual area per vertex (a third of each incident face)."""
        out = np.zeros(len(self.vertices))
        a = self.face_areas() / 3.0
        for j in range(3):
            np.add.at(out, self.faces[:, j], a)
        return out

    def vertex_normals(self) -> np.ndarray:
        n = self.face_normals(normalize=False)  # area weighted
        out = np.zeros_like(self.vertices)
        for j in range(3):
            np.add.at(out, self.faces[:, j], n)
        length = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.where(length > 0, length, 1.0)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def boundary_edge_fraction(self) -> float:
        """Fraction of undirected edges used by exactly one face."""
        if len(self.faces) == 0:
            return 0.0
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return float(np.mean(counts == 1))

    def diameter(self) -> float:
        return point_diameter(self.vertices)

    def sample_surface(self, n: int, seed: int = 0) -> np.ndarray:
        return self.sample_surface_with_faces(n, seed)[0]

    def sample_surface_with_faces(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Area-weighted uniform samples on the surface (fixed seed)."""
        if self.is_empty:
            raise MeshIngestError("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        cdf = np.cumsum(areas)
        idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        idx = np.minimum(idx, len(areas) - 1)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        tri = self.vertices[self.faces[idx]]
        pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
        return pts, idx


def point_diameter(points: np.ndarray) -> float:
    """Largest distance between two points (exact, via the convex hull)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    cand = points
    if len(points) > 64:
        try:
            cand = points[ConvexHull(points).vertices]
        except (QhullError, ValueError):
            cand = points  # degenerate (coplanar or collinear) sets
        if len(cand) > 4000:
            cand = cand[np.linspace(0, len(cand) - 1, 4000).astype(int)]
    return float(pdist(cand).max())


def concatenate(meshes: list[TriangleMesh]) -> TriangleMesh:
    verts, faces, cols = [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        cols.append(m.colors)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(cols))


# --- primitives ----------------------------------------------------------------

_FACE_PALETTE = np.array(
    [
        [0.85, 0.20, 0.15],
        [0.15, 0.55, 0.85],
        [0.95, 0.80, 0.15],
        [0.20, 0.70, 0.30],
        [0.60, 0.25, 0.75],
        [0.95, 0.55, 0.15],
    ]
)


def textured_box(extents=(0.2, 0.14, 0.1), cell: float = 0.005, texture_period: float = 0.04) -> TriangleMesh:
    """Closed box centred on the origin, each face a subdivided grid.

    Vertex colours mix a per-face base colour with a position-dependent
    stripe pattern, so no two faces (or face orientations) look alike.
    """
    ex = np.asarray(extents, dtype=np.float64)
    half = ex / 2.0
    verts, faces, cols = [], [], []
    offset = 0
    face_id = 0
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            nu = max(1, int(np.ceil(ex[u_ax] / cell)))
            nv = max(1, int(np.ceil(ex[v_ax] / cell)))
            us = np.linspace(-half[u_ax], half[u_ax], nu + 1)
            vs = np.linspace(-half[v_ax], half[v_ax], nv + 1)
            uu, vv = np.meshgrid(us, vs, indexing="ij")
            p = np.zeros((uu.size, 3))
            p[:, axis] = sign * half[axis]
            p[:, u_ax] = uu.ravel()
            p[:, v_ax] = vv.ravel()
            idx = np.arange(uu.size).reshape(nu + 1, nv + 1)
            a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
            quad = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
            # outward winding: (u x v) points along +axis for the chosen axis order
            normal = np.zeros(3)
            normal[axis] = sign
            e1 = np.zeros(3)
            e1[u_ax] = 1.0
            e2 = np.zeros(3)
            e2[v_ax] = 1.0
            if np.cross(e1, e2) @ normal < 0:
                quad = quad[:, ::-1]
            base = _FACE_PALETTE[face_id]
            stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (uu.ravel() * 1.0 + 0.6 * vv.ravel()) / texture_period)
            dots = 0.5 + 0.5 * np.cos(2 * np.pi * vv.ravel() / (1.7 * texture_period))
            shade = 0.45 + 0.35 * stripes + 0.2 * dots * (face_id % 2)
            verts.append(p)
            faces.append(quad + offset)
            cols.append(np.clip(base[None, :] * shade[:, None], 0, 1))
            offset += len(p)
            face_id += 1
    mesh = TriangleMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(cols))
    return weld(mesh)


def weld(mesh: TriangleMesh, decimals: int = 9) -> TriangleMesh:
    """Merge coincident vertices (first occurrence keeps its colour)."""
    key = np.round(mesh.vertices, decimals)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    new_idx = remap[inverse.ravel()]
    keep = first[order]
    return TriangleMesh(mesh.vertices[keep], new_idx[mesh.faces], mesh.colors[keep])


def sphere_mesh(radius: float = 0.05, level: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    v, f = icosphere(level)
    colors = 0.5 + 0.5 * v  # direction-coded colour
    return TriangleMesh(v * radius + np.asarray(center, dtype=np.float64), f, colors)


def cylinder_mesh(radius: float = 0.04, height: float = 0.12, segments: int = 64, rings: int = 12) -> TriangleMesh:
    """Closed cylinder around the z axis, centred on the origin."""
    ang = 2 * np.pi * np.arange(segments) / segments
    zs = np.linspace(-height / 2, height / 2, rings + 1)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], 1)
    side = np.concatenate([np.column_stack([ring, np.full(segments, z)]) for z in zs])
    faces = []
    for r in range(rings):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = a + segments
            d = b + segments
            faces += [[a, b, d], [a, d, c]]
    n_side = len(side)
    bottom_c, top_c = n_side, n_side + 1
    verts = np.concatenate([side, [[0, 0, -height / 2], [0, 0, height / 2]]])
    top0 = rings * segments
    for s in range(segments):
        faces.append([bottom_c, (s + 1) % segments, s])
        faces.append([top_c, top0 + s, top0 + (s + 1) % segments])
    colors = np.tile([0.7, 0.7, 0.7], (len(verts), 1))
    return TriangleMesh(verts, np.array(faces), colors)


# --- file I/O --------------------------------------------------------------------

def write_ply(path, mesh: TriangleMesh, uncertain: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float32 xyz, uint8 rgb and optional uint8 ``uncertain``."""
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if uncertain is not None:
        fields.append(("uncertain", "u1"))
    vert = np.empty(len(mesh.vertices), dtype=fields)
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T.astype(np.float32)
    rgb = np.round(mesh.colors * 255.0).astype(np.uint8)
    vert["red"], vert["green"], vert["blue"] = rgb.T
    if uncertain is not None:
        vert["uncertain"] = np.asarray(uncertain, dtype=np.uint8)
    face = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,))])
    face["vertex_indices"] = mesh.faces.astype(np.int32)
    PlyData(
        [PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
        text=False,
        byte_order="<",
    ).write(str(path))


def read_ply(path) -> tuple[TriangleMesh, np.ndarray | None]:
    """Read a PLY mesh; returns the mesh and the ``uncertain`` labels if present."""
    try:
        ply = PlyData.read(str(path))
    except Exception as exc:  # plyfile raises a mix of error types
        raise MeshIngestError(f"cannot parse PLY {path}: {exc}") from exc
    v = ply["vertex"].data
    names = v.dtype.names
    verts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.column_stack([v["red"], v["green"], v["blue"]]).astype(np.float64)
        if colors.max(initial=0) > 1.0 or v["red"].dtype.kind in "ui":
            colors = colors / 255.0
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in ply:
        fd = ply["face"].data
        key = "vertex_indices" if "vertex_indices" in fd.dtype.names else fd.dtype.names[0]
        faces = _triangulate([np.asarray(f) for f in fd[key]])
    unc = np.asarray(v["uncertain"]).astype(bool) if "uncertain" in names else None
    return TriangleMesh(verts, faces, colors), unc


def read_obj(path) -> TriangleMesh:
    """Minimal OBJ reader: ``v x y z [r g b]`` and polygonal ``f`` records."""
    verts, cols, polys = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                verts.append(vals[:3])
                cols.append(vals[3:6] if len(vals) >= 6 else [0.5, 0.5, 0.5])
            elif parts[0] == "f":
                polys.append([int(p.split("/")[0]) for p in parts[1:]])
    if not verts:
        raise MeshIngestError(f"no vertices in {path}")
    n = len(verts)
    polys = [[i - 1 if i > 0 else n + i for i in p] for p in polys]
    cols = np.asarray(cols, dtype=np.float64)
    if cols.max(initial=0) > 1.0:
        cols = cols / 255.0
    return TriangleMesh(np.asarray(verts), _triangulate(polys), cols)


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for p, c in zip(mesh.vertices, mesh.colors):
            fh.write(f"v {p[0]:.7g} {p[1]:.7g} {p[2]:.7g} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise MeshIngestError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".ply":
        mesh = read_ply(path)[0]
    elif suffix == ".obj":
        mesh = read_obj(path)
    else:
        raise MeshIngestError(f"unsupported mesh format: {suffix}")
    if mesh.is_empty:
        raise MeshIngestError(f"mesh {path} has no faces")
    return mesh


def _triangulate(polys) -> np.ndarray:
    tris = []
    for p in polys:
        for i in range(1, len(p) - 1):
            tris.append([p[0], p[i], p[i + 1]])
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)
