"""Rigid-body math, pinhole projection and viewpoint sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


class InvalidRotationError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


class EmptySetError(ValueError):
    pass


def check_rotation(r: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise InvalidRotationError(f"expected 3x3 rotation, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise InvalidRotationError("rotation contains non-finite entries")
    if abs(np.linalg.det(r) - 1.0) > tol or np.abs(r.T @ r - np.eye(3)).max() > tol:
        raise InvalidRotationError("matrix is not a proper rotation")
    return r


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Closest rotation in the Frobenius sense (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def axis_angle_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; ``rotvec`` is axis * angle."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec)
    if theta < 1e-12:
        return np.eye(3) + skew(rotvec)
    k = skew(rotvec / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping object coordinates into the camera frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"pose matrix must be 4x4 or 3x4, got {m.shape}")
        return cls(check_rotation(m[:3, :3]), m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        # (self @ other)(x) = self(other(x))
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def normalized(self) -> "Pose":
        return Pose(orthonormalize(self.rotation), self.translation)

    def to_list(self) -> list:
        return self.matrix.tolist()


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


def project(point, k: Intrinsics) -> tuple[float, float, float]:
    """Project one camera-frame point to ``(u, v, depth)``."""
    x, y, z = (float(c) for c in np.asarray(point, dtype=np.float64).reshape(3))
    if z <= 0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, z


def back_project(u, v, depth, k: Intrinsics) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    return np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)


def project_points(points: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; points with z <= 0 get NaN pixel coordinates."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, k.fx * points[:, 0] / z + k.cx, np.nan)
        v = np.where(z > 0, k.fy * points[:, 1] / z + k.cy, np.nan)
    return np.stack([u, v], axis=1), z


def depth_to_points(depth: np.ndarray, mask: np.ndarray | None, k: Intrinsics) -> np.ndarray:
    """Back-project valid (masked, positive) depth pixels to camera-frame points."""
    valid = depth > 0
    if mask is not None:
        valid &= mask.astype(bool)
    v, u = np.nonzero(valid)
    return back_project(u, v, depth[v, u], k)


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in radians of the relative rotation between ``a`` and ``b``."""
    a = check_rotation(a)
    b = check_rotation(b)
    m = a.T @ b
    c = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    # atan2 form equals arccos(c) but keeps precision near 0 and pi
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return float(np.arctan2(s, c))


# --- viewpoint sampling ----------------------------------------------------

_ICO_VERTS = np.array(
    [
        [-1, GOLDEN, 0], [1, GOLDEN, 0], [-1, -GOLDEN, 0], [1, -GOLDEN, 0],
        [0, -1, GOLDEN], [0, 1, GOLDEN], [0, -1, -GOLDEN], [0, 1, -GOLDEN],
        [GOLDEN, 0, -1], [GOLDEN, 0, 1], [-GOLDEN, 0, -1], [-GOLDEN, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere by midpoint subdivision.

    Vertex order is deterministic: the vertices of the previous level come
    first, then one new vertex per edge in sorted ``(i, j)`` order.
    """
    if level < 0:
        raise ValueError("subdivision level must be non-negative")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    for _ in range(level):
        edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
        edges = np.unique(edges, axis=0)  # lexicographically sorted
        n = len(verts)
        lookup = {(int(i), int(j)): n + e for e, (i, j) in enumerate(edges)}
        mids = verts[edges[:, 0]] + verts[edges[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        verts = np.concatenate([verts, mids])

        def mid(i, j):
            return lookup[(min(i, j), max(i, j))]

        new_faces = []
        for a, b, c in faces.tolist():
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on a golden-angle spiral."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def look_at_rotation(camera_position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Object-to-camera rotation for a camera at ``camera_position`` looking at ``target``.

    Camera axes follow the OpenCV convention (x right, y down, z forward).
    The up hint defaults to +y of the object frame; +x is used instead when
    the view direction is (anti)parallel to the hint.
    """
    forward = np.asarray(target, dtype=np.float64) - np.asarray(camera_position, dtype=np.float64)
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with the target")
    z = forward / norm
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    if abs(abs(z @ up) - 1.0) < 1e-6:
        up = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.5 else np.array([0.0, 1.0, 0.0])
    down = -up
    y = down - (down @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    cam_to_obj = np.stack([x, y, z], axis=1)
    return cam_to_obj.T


@dataclass(frozen=True)
class ViewpointSet:
    rotations: np.ndarray  # (N, 3, 3), object -> camera
    source: str = "explicit"
    positions: np.ndarray | None = None  # unit camera directions, object frame

    def __len__(self):
        return len(self.rotations)

    def __iter__(self):
        return iter(self.rotations)


def viewpoints_from_directions(directions: np.ndarray, target_center=(0.0, 0.0, 0.0),
                               source: str = "explicit") -> ViewpointSet:
    target = np.asarray(target_center, dtype=np.float64)
    dirs = np.asarray(directions, dtype=np.float64)
    rots = np.stack([look_at_rotation(target + d, target) for d in dirs])
    return ViewpointSet(rots, source, dirs)


def icosphere_viewpoints(subdivision_level: int, target_center=(0.0, 0.0, 0.0)) -> ViewpointSet:
    """One look-at camera rotation per icosphere vertex (12, 42, 162, 642)."""
    if not 0 <= subdivision_level <= 3:
        raise ValueError("subdivision_level must be in [0, 3]")
    verts, _ = icosphere(subdivision_level)
    return viewpoints_from_directions(verts, target_center, "icosphere_subdivision")


def sphere_viewpoints(n: int, target_center=(0.0, 0.0, 0.0)) -> ViewpointSet:
    """``n`` viewpoints spread over the sphere.

    Icosphere vertices when ``n`` is 12, 42, 162 or 642, a Fibonacci spiral
    otherwise.
    """
    if n < 1:
        raise EmptySetError("need at least one viewpoint")
    counts = {12: 0, 42: 1, 162: 2, 642: 3}
    if n in counts:
        return icosphere_viewpoints(counts[n], target_center)
    return viewpoints_from_directions(fibonacci_sphere(n), target_center)


def inplane_rotations(n: int) -> np.ndarray:
    """``n`` rotations about the optical axis, evenly spaced in [0, 2*pi)."""
    if n < 1:
        raise EmptySetError("need at least one in-plane rotation")
    return np.stack([rot_z(2.0 * np.pi * i / n) for i in range(n)])


# --- pose file helpers -------------------------------------------------------

def pose_to_json(pose: Pose, **extra) -> str:
    return json.dumps({"pose": pose.to_list(), **extra})


def parse_pose(text: str) -> Pose:
    """Parse a pose given as JSON (``{"pose": 4x4}`` or a bare 4x4 list) or 16 numbers."""
    text = text.strip()
    if text.startswith("{") or text.startswith("["):
        obj = json.loads(text)
        if isinstance(obj, dict):
            obj = obj["pose"]
        return Pose.from_matrix(obj)
    return Pose.from_matrix(np.array(text.replace(",", " ").split(), dtype=np.float64))


def read_pose_lines(lines: Iterable[str]) -> list[Pose]:
    return [parse_pose(ln) for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def min_pairwise_geodesic(rotations: Sequence[np.ndarray]) -> float:
    """Smallest pairwise geodesic distance in a rotation set."""
    best = np.pi
    for i in range(len(rotations)):
        for j in range(i + 1, len(rotations)):
            best = min(best, geodesic_distance(rotations[i], rotations[j]))
    return best
