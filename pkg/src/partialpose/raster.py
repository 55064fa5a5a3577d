"""Software z-buffer rasterizer and per-vertex visibility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geom import Intrinsics, Pose
from .mesh import TriangleMesh

NEAR = 1e-4


class EmptyModelError(ValueError):
    pass


@njit(cache=True)
def _raster_kernel(px, py, pz, faces, height, width, zbuf, fid, bary):
    """Perspective-correct z-buffer; pixel (r, c) samples image point (c, r)."""
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        z0 = pz[i0]
        z1 = pz[i1]
        z2 = pz[i2]
        if z0 <= NEAR or z1 <= NEAR or z2 <= NEAR:
            continue
        x0 = px[i0]
        y0 = py[i0]
        x1 = px[i1]
        y1 = py[i1]
        x2 = px[i2]
        y2 = py[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = int(np.ceil(min(x0, x1, x2)))
        xmax = int(np.floor(max(x0, x1, x2)))
        ymin = int(np.ceil(min(y0, y1, y2)))
        ymax = int(np.floor(max(y0, y1, y2)))
        if xmin < 0:
            xmin = 0
        if ymin < 0:
            ymin = 0
        if xmax > width - 1:
            xmax = width - 1
        if ymax > height - 1:
            ymax = height - 1
        if xmin > xmax or ymin > ymax:
            continue
        inv_area = 1.0 / area
        iz0 = 1.0 / z0
        iz1 = 1.0 / z1
        iz2 = 1.0 / z2
        for y in range(ymin, ymax + 1):
            for x in range(xmin, xmax + 1):
                w0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) * inv_area
                w1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                iz = w0 * iz0 + w1 * iz1 + w2 * iz2
                depth = 1.0 / iz
                if depth < zbuf[y, x]:
                    zbuf[y, x] = depth
                    fid[y, x] = f
                    bary[y, x, 0] = w0 * iz0 / iz
                    bary[y, x, 1] = w1 * iz1 / iz
                    bary[y, x, 2] = w2 * iz2 / iz


def raster_buffers(vertices_cam: np.ndarray, faces: np.ndarray, k: Intrinsics):
    """Rasterize camera-frame vertices.

    Returns ``(depth, face_id, bary)``: depth is ``inf`` on background,
    ``face_id`` is -1 there, and ``bary`` holds perspective-correct
    barycentric weights of the winning face.
    """
    v = np.asarray(vertices_cam, dtype=np.float64)
    z = v[:, 2]
    safe = np.where(z > NEAR, z, 1.0)
    px = k.fx * v[:, 0] / safe + k.cx
    py = k.fy * v[:, 1] / safe + k.cy
    zbuf = np.full((k.height, k.width), np.inf)
    fid = np.full((k.height, k.width), -1, dtype=np.int64)
    bary = np.zeros((k.height, k.width, 3))
    _raster_kernel(px, py, z, np.ascontiguousarray(faces, dtype=np.int64), k.height, k.width, zbuf, fid, bary)
    return zbuf, fid, bary


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = background
    mask: np.ndarray  # (H, W) bool
    uncertainty: np.ndarray  # (H, W) bool, subset of mask
    face_id: np.ndarray | None = None
    bary: np.ndarray | None = None


def face_majority(uncertain: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """A face is uncertain when at least two of its three vertices are."""
    return np.asarray(uncertain, dtype=bool)[faces].sum(axis=1) >= 2


def rasterize(mesh: TriangleMesh, uncertain, pose: Pose, k: Intrinsics,
              face_uncertain: np.ndarray | None = None) -> RenderOutput:
    """Render colour, depth, mask and uncertainty of a labelled mesh at ``pose``.

    ``uncertain`` is the per-vertex label array (or ``None`` for all
    certain). ``face_uncertain`` may be passed to skip the majority vote.
    """
    if mesh.is_empty:
        raise EmptyModelError("cannot render an empty mesh")
    zbuf, fid, bary = raster_buffers(pose.apply(mesh.vertices), mesh.faces, k)
    mask = fid >= 0
    depth = np.where(mask, zbuf, 0.0)
    color = np.zeros((k.height, k.width, 3))
    unc = np.zeros((k.height, k.width), dtype=bool)
    if mask.any():
        f = fid[mask]
        b = bary[mask]
        tri_cols = mesh.colors[mesh.faces[f]]  # (P, 3 verts, 3 channels)
        color[mask] = np.einsum("pv,pvc->pc", b, tri_cols)
        if face_uncertain is None:
            face_uncertain = (
                np.zeros(len(mesh.faces), dtype=bool) if uncertain is None else face_majority(uncertain, mesh.faces)
            )
        unc[mask] = face_uncertain[f]
    return RenderOutput(color, depth, mask, unc, fid, bary)


def default_visibility_eps(mesh: TriangleMesh, voxel_size: float | None = None) -> float:
    """Depth tolerance: half a voxel, or half the median edge when no volume is known."""
    if voxel_size is None:
        tri = mesh.vertices[mesh.faces[: min(len(mesh.faces), 20000)]]
        voxel_size = float(np.median(np.linalg.norm(tri[:, 1] - tri[:, 0], axis=1)))
    return max(1e-4, 0.5 * voxel_size)


def vertex_visibility(mesh: TriangleMesh, pose: Pose, k: Intrinsics, reference_mask=None,
                      eps: float | None = None, buffers=None) -> np.ndarray:
    """Per-vertex visibility from a camera at ``pose``.

    A vertex is visible when it projects inside the image, no face crossed by
    its camera ray lies more than ``eps`` in front of it, and (if given) its
    pixel is inside ``reference_mask``. The z-buffer supplies candidate
    occluders around the projection; each is tested with an exact
    ray-triangle intersection so slanted faces near silhouettes are not
    judged by their extended plane.
    """
    if mesh.is_empty:
        raise EmptyModelError("cannot test visibility on an empty mesh")
    if eps is None:
        eps = default_visibility_eps(mesh)
    cam = pose.apply(mesh.vertices)
    if buffers is None:
        buffers = raster_buffers(cam, mesh.faces, k)
    _, fid, _ = buffers
    z = cam[:, 2]
    front = z > NEAR
    safe = np.where(front, z, 1.0)
    u = k.fx * cam[:, 0] / safe + k.cx
    v = k.fy * cam[:, 1] / safe + k.cy
    col = np.round(u).astype(np.int64)
    row = np.round(v).astype(np.int64)
    inside = front & (col >= 0) & (col < k.width) & (row >= 0) & (row < k.height)
    visible = np.zeros(len(cam), dtype=bool)
    idx = np.nonzero(inside)[0]
    if len(idx) == 0:
        return visible
    r, c = row[idx], col[idx]
    offsets, incident = _vertex_faces(mesh.faces, len(cam))
    occluded = np.zeros(len(idx), dtype=bool)
    _occlusion_kernel(cam, mesh.faces, fid, offsets, incident, idx, r, c, float(eps), occluded)
    ok = ~occluded
    if reference_mask is not None:
        ok &= np.asarray(reference_mask, dtype=bool)[r, c]
    visible[idx] = ok
    return visible


def _vertex_faces(faces: np.ndarray, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR map from vertex to incident faces."""
    flat = faces.ravel()
    order = np.argsort(flat, kind="stable")
    offsets = np.zeros(n_vertices + 1, dtype=np.int64)
    np.cumsum(np.bincount(flat, minlength=n_vertices), out=offsets[1:])
    return offsets, (order // 3).astype(np.int64)


@njit(cache=True)
def _segment_blocked(cam, p, i0, i1, i2, eps):
    """Segment from the origin to cam[p] crosses triangle (i0, i1, i2) more than eps (in depth) before it."""
    px, py, pz = cam[p, 0], cam[p, 1], cam[p, 2]
    ax, ay, az = cam[i0, 0], cam[i0, 1], cam[i0, 2]
    e1x, e1y, e1z = cam[i1, 0] - ax, cam[i1, 1] - ay, cam[i1, 2] - az
    e2x, e2y, e2z = cam[i2, 0] - ax, cam[i2, 1] - ay, cam[i2, 2] - az
    qx, qy, qz = py * e2z - pz * e2y, pz * e2x - px * e2z, px * e2y - py * e2x
    det = e1x * qx + e1y * qy + e1z * qz
    if abs(det) < 1e-18:
        return False
    inv = 1.0 / det
    u = -(ax * qx + ay * qy + az * qz) * inv
    if u < -1e-9 or u > 1.0 + 1e-9:
        return False
    # s = -a, r = s x e1
    rx, ry, rz = -(ay * e1z - az * e1y), -(az * e1x - ax * e1z), -(ax * e1y - ay * e1x)
    v = (px * rx + py * ry + pz * rz) * inv
    if v < -1e-9 or u + v > 1.0 + 1e-9:
        return False
    t = (e2x * rx + e2y * ry + e2z * rz) * inv
    return t > 0.0 and t * pz < pz - eps


@njit(cache=True)
def _occlusion_kernel(cam, faces, fid, offsets, incident, idx, rows, cols, eps, out):
    """Candidate occluders are the z-buffer winners around each vertex's pixel
    plus every face sharing a vertex with them, which catches thin faces near
    silhouettes that win no pixel of their own."""
    h, w = fid.shape
    for n in range(idx.shape[0]):
        i = idx[n]
        blocked = False
        last = -1
        for dr in range(-1, 2):
            rr = rows[n] + dr
            if rr < 0 or rr >= h or blocked:
                continue
            for dc in range(-1, 2):
                cc = cols[n] + dc
                if cc < 0 or cc >= w or blocked:
                    continue
                f = fid[rr, cc]
                if f < 0 or f == last:
                    continue
                last = f
                for k in range(3):
                    vtx = faces[f, k]
                    for m in range(offsets[vtx], offsets[vtx + 1]):
                        g = incident[m]
                        if faces[g, 0] == i or faces[g, 1] == i or faces[g, 2] == i:
                            continue
                        if _segment_blocked(cam, i, faces[g, 0], faces[g, 1], faces[g, 2], eps):
                            blocked = True
                            break
                    if blocked:
                        break
        out[n] = blocked


def ray_visibility_oracle(mesh: TriangleMesh, pose: Pose, k: Intrinsics, eps: float = 1e-6,
                          rel_tol: float = 1e-3) -> np.ndarray:
    """Brute-force visibility: ray from the camera centre to each vertex
    tested against every face (Moller-Trumbore). Only for small meshes."""
    cam = pose.apply(mesh.vertices)
    tri = cam[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    out = np.zeros(len(cam), dtype=bool)
    for i, p in enumerate(cam):
        if p[2] <= NEAR:
            continue
        uu = k.fx * p[0] / p[2] + k.cx
        vv = k.fy * p[1] / p[2] + k.cy
        if not (-0.5 <= uu < k.width - 0.5 and -0.5 <= vv < k.height - 0.5):
            continue
        d = p  # segment origin at camera centre, t = 1 at the vertex
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-15
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -tri[:, 0]
        a = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        b = np.einsum("j,ij->i", d, qvec) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        incident = np.any(mesh.faces == i, axis=1)
        blocked = ok & ~incident & (a >= -eps) & (b >= -eps) & (a + b <= 1 + eps) & (t > eps) & (t < 1 - rel_tol)
        out[i] = not blocked.any()
    return out
