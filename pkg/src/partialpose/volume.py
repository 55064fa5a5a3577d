"""Truncated signed-distance + colour volume.

Fusion follows the usual weighted running average. Voxels in front of the
observed surface (and voxels seen through the background, outside the
object mask) are carved to +1; voxels more than one truncation distance
behind the surface are left alone. For extraction, voxels that some camera
covered but nothing ever observed are treated as inside, which closes the
mesh around unseen regions like a visual hull.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.ndimage import map_coordinates
from skimage.measure import marching_cubes

from .geom import Intrinsics, Pose
from .mesh import TriangleMesh

DEFAULT_TRUNCATION = 0.01
DEFAULT_RESOLUTION = 128
DEFAULT_PADDING = 0.05
_MAGIC = b"PPTSDF"
_VERSION = 1


class NoObservationError(ValueError):
    pass


class EmptyMeshError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class RaycastConfig:
    alpha: float = 300.0  # 1/m, density sharpness
    step: float = 0.001  # m
    near_band: float = DEFAULT_TRUNCATION  # m, window is [z - near_band, z + 0.5 * near_band]

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.step <= 0:
            raise ValueError("step must be positive")


@dataclass
class FusionStats:
    updated: int = 0
    carved: int = 0
    in_frustum: int = 0
    behind_camera: bool = False


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float = DEFAULT_TRUNCATION
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)
    color: np.ndarray = field(default=None, repr=False)
    color_weight: np.ndarray = field(default=None, repr=False)
    frustum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.truncation < 2 * self.voxel_size - 1e-12:
            raise ValueError(
                f"truncation {self.truncation} must be at least two voxels ({2 * self.voxel_size})"
            )
        shape = self.dims
        if self.tsdf is None:
            self.tsdf = np.ones(shape, dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(shape, dtype=np.float32)
        if self.color is None:
            self.color = np.zeros(shape + (3,), dtype=np.float32)
        if self.color_weight is None:
            self.color_weight = np.zeros(shape, dtype=np.float32)
        if self.frustum is None:
            self.frustum = np.zeros(shape, dtype=np.uint16)

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3))

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(
            self.origin.copy(), self.voxel_size, self.dims, self.truncation,
            self.tsdf.copy(), self.weight.copy(), self.color.copy(),
            self.color_weight.copy(), self.frustum.copy(),
        )

    def closed_field(self) -> np.ndarray:
        """Normalized SDF used for extraction and raycasting (unknown-but-covered = inside)."""
        unknown = np.where(self.frustum > 0, np.float32(-1.0), np.float32(1.0))
        return np.where(self.weight > 0, self.tsdf, unknown).astype(np.float32)

    def integrate(self, color, depth, mask, pose: Pose, k: Intrinsics) -> FusionStats:
        return integrate_frame(self, color, depth, mask, pose, k)

    def save(self, path) -> None:
        save_volume(self, path)


def init_volume(points: np.ndarray, padding: float = DEFAULT_PADDING, resolution: int = DEFAULT_RESOLUTION,
                truncation: float = DEFAULT_TRUNCATION) -> TsdfVolume:
    """Cubic voxel grid centred on the padded bounding box of ``points``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise NoObservationError("no observed points to bound the volume")
    lo = points.min(axis=0) - padding
    hi = points.max(axis=0) + padding
    extent = float((hi - lo).max())
    voxel = extent / resolution
    center = (lo + hi) / 2.0
    origin = center - extent / 2.0
    return TsdfVolume(origin, voxel, (resolution,) * 3, truncation)


def integrate_frame(vol: TsdfVolume, color, depth, mask, pose: Pose, k: Intrinsics) -> FusionStats:
    """Fuse one masked RGBD frame observed from ``pose`` (object -> camera)."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != k.shape or mask.shape != depth.shape:
        raise ShapeError(f"depth {depth.shape} / mask {mask.shape} do not match intrinsics {k.shape}")
    if color is not None:
        color = np.asarray(color, dtype=np.float32)
        if color.shape[:2] != depth.shape:
            raise ShapeError(f"color {color.shape} does not match depth {depth.shape}")
    stats = FusionStats()
    xs, ys, zs = vol.axes()
    r = pose.rotation
    t = pose.translation
    zc = (r[2, 0] * xs[:, None, None] + r[2, 1] * ys[None, :, None] + r[2, 2] * zs[None, None, :] + t[2]).ravel()
    front = zc > 1e-4
    if not front.any():
        stats.behind_camera = True
        return stats
    idx = np.nonzero(front)[0]
    ix, iy, iz = np.unravel_index(idx, vol.dims)
    z = zc[idx]
    x = r[0, 0] * xs[ix] + r[0, 1] * ys[iy] + r[0, 2] * zs[iz] + t[0]
    y = r[1, 0] * xs[ix] + r[1, 1] * ys[iy] + r[1, 2] * zs[iz] + t[1]
    u = np.round(k.fx * x / z + k.cx).astype(np.int64)
    v = np.round(k.fy * y / z + k.cy).astype(np.int64)
    inimg = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    idx, z, u, v = idx[inimg], z[inimg], u[inimg], v[inimg]
    stats.in_frustum = len(idx)
    if len(idx) == 0:
        return stats
    frustum = vol.frustum.reshape(-1)
    frustum[idx] = np.minimum(frustum[idx].astype(np.int64) + 1, np.iinfo(np.uint16).max)

    d = depth[v, u]
    m = mask[v, u]
    lam = vol.truncation
    diff = d - z
    band = m & (d > 0) & (diff >= -lam)
    carve = ~m & ((d <= 0) | (diff > lam))
    obs_idx = np.concatenate([idx[band], idx[carve]])
    obs = np.concatenate([np.clip(diff[band] / lam, -1.0, 1.0), np.ones(int(carve.sum()))]).astype(np.float32)
    tsdf = vol.tsdf.reshape(-1)
    weight = vol.weight.reshape(-1)
    w_old = weight[obs_idx]
    tsdf[obs_idx] = (tsdf[obs_idx] * w_old + obs) / (w_old + 1.0)
    weight[obs_idx] = w_old + 1.0
    stats.updated = int(band.sum())
    stats.carved = int(carve.sum())

    if color is not None:
        near = band & (np.abs(diff) < lam)
        cidx = idx[near]
        cw = vol.color_weight.reshape(-1)
        col = vol.color.reshape(-1, 3)
        w_c = cw[cidx]
        col[cidx] = (col[cidx] * w_c[:, None] + color[v[near], u[near]]) / (w_c[:, None] + 1.0)
        cw[cidx] = w_c + 1.0
    return stats


def sample_color(vol: TsdfVolume, points: np.ndarray) -> np.ndarray:
    """Trilinear colour lookup at world points, ignoring never-coloured voxels."""
    g = ((np.asarray(points) - vol.origin) / vol.voxel_size - 0.5).T
    cw = map_coordinates(vol.color_weight, g, order=1, mode="nearest")
    out = np.full((len(points), 3), 0.5)
    ok = cw > 1e-6
    for c in range(3):
        num = map_coordinates(vol.color[..., c] * vol.color_weight, g, order=1, mode="nearest")
        out[ok, c] = num[ok] / cw[ok]
    return np.clip(out, 0.0, 1.0)


def extract_mesh(vol: TsdfVolume) -> TriangleMesh:
    """Marching-cubes isosurface of the closed field, coloured from the colour grid."""
    if not (vol.weight > 0).any():
        raise EmptyMeshError("volume has no observations")
    f = vol.closed_field()
    if not (f < 0).any() or not (f > 0).any():
        raise EmptyMeshError("no zero crossing in the volume")
    padded = np.pad(f, 1, mode="constant", constant_values=1.0)
    verts, faces, _, _ = marching_cubes(padded, level=0.0, method="lorensen", allow_degenerate=False)
    verts = vol.origin + (verts.astype(np.float64) - 0.5) * vol.voxel_size
    if len(faces) == 0:
        raise EmptyMeshError("marching cubes produced no faces")
    return TriangleMesh(verts, faces, sample_color(vol, verts))


# --- raycasting ------------------------------------------------------------------

@njit(cache=True)
def _trilinear(grid, gx, gy, gz, outside):
    nx, ny, nz = grid.shape[0], grid.shape[1], grid.shape[2]
    if gx < 0.0 or gy < 0.0 or gz < 0.0 or gx > nx - 1 or gy > ny - 1 or gz > nz - 1:
        return outside
    x0 = min(int(gx), nx - 2)
    y0 = min(int(gy), ny - 2)
    z0 = min(int(gz), nz - 2)
    fx = gx - x0
    fy = gy - y0
    fz = gz - z0
    c00 = grid[x0, y0, z0] * (1 - fx) + grid[x0 + 1, y0, z0] * fx
    c10 = grid[x0, y0 + 1, z0] * (1 - fx) + grid[x0 + 1, y0 + 1, z0] * fx
    c01 = grid[x0, y0, z0 + 1] * (1 - fx) + grid[x0 + 1, y0, z0 + 1] * fx
    c11 = grid[x0, y0 + 1, z0 + 1] * (1 - fx) + grid[x0 + 1, y0 + 1, z0 + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def bell_density(sdf, alpha):
    """Product of the two logistic sigmoids: 1/4 at the surface, symmetric in ``sdf``."""
    a = alpha * sdf
    if a > 0:
        e = np.exp(-a)
        return e / ((1.0 + e) * (1.0 + e))
    e = np.exp(a)
    return e / ((1.0 + e) * (1.0 + e))


@njit(cache=True)
def _raycast_kernel(field, cr, cg, cb, origin, vs, lam, rot, trans, fx, fy, cx, cy, height, width,
                    step, alpha, band, guide, use_guide, out_color, out_depth, out_density):
    nx, ny, nz = field.shape[0], field.shape[1], field.shape[2]
    # camera centre in the object frame
    ox = -(rot[0, 0] * trans[0] + rot[1, 0] * trans[1] + rot[2, 0] * trans[2])
    oy = -(rot[0, 1] * trans[0] + rot[1, 1] * trans[1] + rot[2, 1] * trans[2])
    oz = -(rot[0, 2] * trans[0] + rot[1, 2] * trans[1] + rot[2, 2] * trans[2])
    lo = origin
    hi0 = origin[0] + nx * vs
    hi1 = origin[1] + ny * vs
    hi2 = origin[2] + nz * vs
    for r in range(height):
        for c in range(width):
            # camera ray with unit z so the ray parameter is the camera depth
            dxc = (c - cx) / fx
            dyc = (r - cy) / fy
            norm = np.sqrt(dxc * dxc + dyc * dyc + 1.0)
            dx = rot[0, 0] * dxc + rot[1, 0] * dyc + rot[2, 0]
            dy = rot[0, 1] * dxc + rot[1, 1] * dyc + rot[2, 1]
            dz = rot[0, 2] * dxc + rot[1, 2] * dyc + rot[2, 2]
            tmin = 0.0
            tmax = 1e30
            ok = True
            for a in range(3):
                o = ox if a == 0 else (oy if a == 1 else oz)
                d = dx if a == 0 else (dy if a == 1 else dz)
                l = lo[a]
                h = hi0 if a == 0 else (hi1 if a == 1 else hi2)
                if abs(d) < 1e-12:
                    if o < l or o > h:
                        ok = False
                else:
                    t1 = (l - o) / d
                    t2 = (h - o) / d
                    if t1 > t2:
                        t1, t2 = t2, t1
                    tmin = max(tmin, t1)
                    tmax = min(tmax, t2)
            if not ok or tmax <= tmin:
                continue
            dz_step = step / norm
            center = -1.0
            if use_guide:
                g = guide[r, c]
                if g <= 0.0:
                    continue
                center = g
            else:
                prev = 1.0
                prev_t = tmin
                t = tmin
                while t <= tmax:
                    gx = (ox + t * dx - lo[0]) / vs - 0.5
                    gy = (oy + t * dy - lo[1]) / vs - 0.5
                    gz = (oz + t * dz - lo[2]) / vs - 0.5
                    s = _trilinear(field, gx, gy, gz, 1.0)
                    if prev > 0.0 and s <= 0.0:
                        frac = prev / (prev - s) if prev != s else 0.0
                        center = prev_t + frac * (t - prev_t)
                        break
                    prev = s
                    prev_t = t
                    t += dz_step
                if center < 0.0:
                    continue
            total = 0.0
            acc_r = 0.0
            acc_g = 0.0
            acc_b = 0.0
            acc_z = 0.0
            t = max(center - band, tmin)
            t_end = min(center + 0.5 * band, tmax)
            while t <= t_end:
                gx = (ox + t * dx - lo[0]) / vs - 0.5
                gy = (oy + t * dy - lo[1]) / vs - 0.5
                gz = (oz + t * dz - lo[2]) / vs - 0.5
                s = _trilinear(field, gx, gy, gz, 1.0) * lam
                w = bell_density(s, alpha) * step
                total += w
                acc_r += w * _trilinear(cr, gx, gy, gz, 0.5)
                acc_g += w * _trilinear(cg, gx, gy, gz, 0.5)
                acc_b += w * _trilinear(cb, gx, gy, gz, 0.5)
                acc_z += w * t
                t += dz_step
            out_density[r, c] = total
            if total > 0.0:
                out_color[r, c, 0] = acc_r / total
                out_color[r, c, 1] = acc_g / total
                out_color[r, c, 2] = acc_b / total
                out_depth[r, c] = acc_z / total


def raycast_render(vol: TsdfVolume, pose: Pose, k: Intrinsics, cfg: RaycastConfig | None = None,
                   guide_depth: np.ndarray | None = None, min_density: float = 1e-3):
    """Volume-render colour, depth and mask with the bell-shaped surface density.

    Samples are integrated over ``[z - band, z + band / 2]`` around the
    guide depth when one is given, otherwise around the first sign change
    along the ray. Colour is the density-normalised integral; the mask keeps
    pixels whose integrated density (per metre of ray) exceeds ``min_density``.
    """
    cfg = cfg or RaycastConfig(near_band=vol.truncation)
    if cfg.step > vol.voxel_size / 2 + 1e-12:
        raise ValueError("raycast step must be at most half a voxel")
    field_ = vol.closed_field()
    cw = vol.color_weight
    cols = [np.where(cw > 0, vol.color[..., i], 0.5).astype(np.float64) for i in range(3)]
    out_color = np.zeros((k.height, k.width, 3))
    out_depth = np.zeros((k.height, k.width))
    density = np.zeros((k.height, k.width))
    use_guide = guide_depth is not None
    guide = np.asarray(guide_depth, dtype=np.float64) if use_guide else np.zeros((1, 1))
    if use_guide and guide.shape != k.shape:
        raise ShapeError("guide depth does not match intrinsics")
    _raycast_kernel(
        field_.astype(np.float64), cols[0], cols[1], cols[2], vol.origin, vol.voxel_size, vol.truncation,
        pose.rotation, pose.translation, k.fx, k.fy, k.cx, k.cy, k.height, k.width,
        cfg.step, cfg.alpha, cfg.near_band, guide, use_guide, out_color, out_depth, density,
    )
    mask = density > min_density
    out_color[~mask] = 0.0
    out_depth[~mask] = 0.0
    return out_color, out_depth, mask


# --- checkpoint --------------------------------------------------------------------

def save_volume(vol: TsdfVolume, path) -> None:
    """Flat binary checkpoint: magic, version, header, then raw grids (little endian)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<3d", *vol.origin))
        fh.write(struct.pack("<d", vol.voxel_size))
        fh.write(struct.pack("<3i", *vol.dims))
        fh.write(struct.pack("<d", vol.truncation))
        for arr, dt in ((vol.tsdf, "<f4"), (vol.weight, "<f4"), (vol.color, "<f4"),
                        (vol.color_weight, "<f4"), (vol.frustum, "<u2")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_volume(path) -> TsdfVolume:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not a volume checkpoint")
    off = len(_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    if version != _VERSION:
        raise ValueError(f"unsupported volume checkpoint version {version}")
    off += 4
    origin = struct.unpack_from("<3d", data, off)
    off += 24
    (voxel,) = struct.unpack_from("<d", data, off)
    off += 8
    dims = struct.unpack_from("<3i", data, off)
    off += 12
    (lam,) = struct.unpack_from("<d", data, off)
    off += 8
    n = int(np.prod(dims))
    grids = []
    for count, dt in ((n, "<f4"), (n, "<f4"), (3 * n, "<f4"), (n, "<f4"), (n, "<u2")):
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
        off += arr.nbytes
        grids.append(arr.copy())
    shape = tuple(dims)
    return TsdfVolume(
        np.array(origin), voxel, shape, lam,
        grids[0].reshape(shape).astype(np.float32), grids[1].reshape(shape).astype(np.float32),
        grids[2].reshape(shape + (3,)).astype(np.float32), grids[3].reshape(shape).astype(np.float32),
        grids[4].reshape(shape).astype(np.uint16),
    )
