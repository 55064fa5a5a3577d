"""Synthetic RGBD sequences with ground truth, and pose / shape metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .frame import Frame
from .geom import Intrinsics, Pose, look_at_rotation, rot_z, sphere_viewpoints
from .mesh import TriangleMesh, load_mesh, textured_box
from .raster import raster_buffers, rasterize

DEFAULT_AUC_THRESHOLD = 0.1  # m


def default_intrinsics() -> Intrinsics:
    return Intrinsics(300.0, 300.0, 159.5, 119.5, 320, 240)


@dataclass(frozen=True)
class Occluder:
    mesh: TriangleMesh
    pose: Pose  # occluder -> camera, static in the camera frame


@dataclass
class SyntheticScene:
    gt_mesh: TriangleMesh
    trajectory: list[Pose]
    k: Intrinsics = field(default_factory=default_intrinsics)
    noise: float = 0.0
    occluder: Occluder | None = None

    def __post_init__(self):
        if not self.trajectory:
            raise ValueError("trajectory must be non-empty")
        if self.noise < 0:
            raise ValueError("depth noise must be non-negative")


# --- trajectories --------------------------------------------------------------------

def orbit_pose(azimuth: float, elevation: float, distance: float, target=(0.0, 0.0, 0.0)) -> Pose:
    """Camera on a sphere around ``target`` (object z is up), looking at it."""
    target = np.asarray(target, dtype=np.float64)
    pos = target + distance * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    r = look_at_rotation(pos, target, up=(0.0, 0.0, 1.0))
    return Pose(r, -r @ pos)


def turntable(n_frames: int = 180, step_deg: float = 2.0, distance: float = 0.6,
              elevation_deg: float = 30.0, start_deg: float = 0.0) -> list[Pose]:
    """Object spinning about its own z axis in front of a static camera."""
    cam = orbit_pose(np.deg2rad(start_deg), np.deg2rad(elevation_deg), distance)
    out = []
    for i in range(n_frames):
        spin = Pose(rot_z(np.deg2rad(step_deg * i)), np.zeros(3))
        out.append(cam @ spin)
    return out


def tumble(n_frames: int = 120, step_deg: float = 2.0, distance: float = 0.6, seed: int = 0) -> list[Pose]:
    """Object rotating about a fixed random axis through its centre."""
    from .geom import axis_angle_to_matrix

    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    cam = orbit_pose(0.0, np.deg2rad(20.0), distance)
    return [cam @ Pose(axis_angle_to_matrix(axis * np.deg2rad(step_deg * i)), np.zeros(3)) for i in range(n_frames)]


def sphere_poses(n: int, distance: float = 0.6) -> list[Pose]:
    """``n`` camera poses spread over the viewing sphere (objects at the origin)."""
    vps = sphere_viewpoints(n)
    return [Pose(r, [0.0, 0.0, distance]) for r in vps.rotations]


# --- rendering -------------------------------------------------------------------------

def render_frame(mesh: TriangleMesh, pose: Pose, k: Intrinsics, noise: float = 0.0,
                 rng: np.random.Generator | None = None, occluder: Occluder | None = None,
                 frame_id=0, attach_pose: bool = False) -> Frame:
    """Rasterize one RGBD frame; the mask is the object silhouette minus occluded pixels."""
    out = rasterize(mesh, None, pose, k)
    color = out.color.copy()
    depth = out.depth.copy()
    mask = out.mask.copy()
    if occluder is not None:
        oz, ofid, obary = raster_buffers(occluder.pose.apply(occluder.mesh.vertices), occluder.mesh.faces, k)
        occ = (ofid >= 0) & (~mask | (oz < np.where(mask, depth, np.inf)))
        depth[occ] = oz[occ]
        f = ofid[occ]
        color[occ] = np.einsum("pv,pvc->pc", obary[occ], occluder.mesh.colors[occluder.mesh.faces[f]])
        mask &= ~occ
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        valid = depth > 0
        depth[valid] += rng.normal(0.0, noise, size=int(valid.sum()))
        depth[valid] = np.maximum(depth[valid], 1e-3)
    return Frame(color, depth, mask, k, pose if attach_pose else None, frame_id)


def render_sequence(scene: SyntheticScene, seed: int = 0) -> tuple[list[Frame], list[Pose]]:
    """Frames (without poses) and their ground-truth poses."""
    rng = np.random.default_rng(seed)
    frames = [
        render_frame(scene.gt_mesh, p, scene.k, scene.noise, rng, scene.occluder, frame_id=i)
        for i, p in enumerate(scene.trajectory)
    ]
    return frames, list(scene.trajectory)


def reference_frames(mesh: TriangleMesh, poses: Sequence[Pose], k: Intrinsics, noise: float = 0.0,
                     seed: int = 0) -> list[Frame]:
    rng = np.random.default_rng(seed)
    return [render_frame(mesh, p, k, noise, rng, frame_id=f"ref{i}", attach_pose=True) for i, p in enumerate(poses)]


# --- scene specs ----------------------------------------------------------------------

def scene_from_spec(spec: dict, base_dir: Path | None = None) -> SyntheticScene:
    """Build a scene from a JSON-style dict.

    Keys: ``mesh`` (path or ``"box"``), ``trajectory`` (turntable, tumble or
    scripted), ``frames``, ``step_deg``, ``distance``, ``elevation_deg``,
    ``sigma``, ``poses`` (scripted only), ``occluder`` and ``intrinsics``.
    """
    mesh_spec = spec.get("mesh", "box")
    if mesh_spec == "box":
        mesh = textured_box(tuple(spec.get("extents", (0.2, 0.14, 0.1))))
    else:
        path = Path(mesh_spec)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        mesh = load_mesh(path)
    k = Intrinsics.from_dict(spec["intrinsics"]) if "intrinsics" in spec else default_intrinsics()
    kind = spec.get("trajectory", "turntable")
    n = int(spec.get("frames", 180))
    if kind == "turntable":
        traj = turntable(n, float(spec.get("step_deg", 2.0)), float(spec.get("distance", 0.6)),
                         float(spec.get("elevation_deg", 30.0)), float(spec.get("start_deg", 0.0)))
    elif kind == "tumble":
        traj = tumble(n, float(spec.get("step_deg", 2.0)), float(spec.get("distance", 0.6)), int(spec.get("seed", 0)))
    elif kind == "scripted":
        traj = [Pose.from_matrix(m) for m in spec["poses"]]
    else:
        raise ValueError(f"unknown trajectory generator {kind!r}")
    occ = None
    if spec.get("occluder"):
        o = spec["occluder"]
        size = o.get("extents", (0.06, 0.3, 0.02))
        occ_mesh = textured_box(tuple(size), cell=0.01)
        occ = Occluder(occ_mesh, Pose.from_matrix(o["pose"]) if "pose" in o else Pose(np.eye(3), o.get("translation", (0.0, 0.0, 0.45))))
    return SyntheticScene(mesh, traj, k, float(spec.get("sigma", 0.0)), occ)


# --- metrics ------------------------------------------------------------------------------

def add_metric(gt: Pose, est: Pose, model_points: np.ndarray) -> float:
    """Mean distance between model points under the two poses."""
    pts = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("need at least one model point")
    return float(np.linalg.norm(gt.apply(pts) - est.apply(pts), axis=1).mean())


def adds_metric(gt: Pose, est: Pose, model_points: np.ndarray) -> float:
    """Mean closest-point distance (symmetric-object variant of ADD)."""
    pts = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("need at least one model point")
    d, _ = cKDTree(est.apply(pts)).query(gt.apply(pts), k=1)
    return float(np.mean(d))


def auc(per_frame_errors, max_threshold: float = DEFAULT_AUC_THRESHOLD) -> float:
    """Area under the accuracy-threshold curve on [0, max_threshold], in percent.

    The accuracy curve is a step function, so the integral is exact:
    each error ``e`` contributes ``max(0, 1 - e / max_threshold)``.
    """
    e = np.asarray(per_frame_errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to integrate")
    e = np.where(np.isfinite(e), e, np.inf)
    return float(100.0 * np.mean(np.clip(1.0 - e / max_threshold, 0.0, None)))


def chamfer_points(a: np.ndarray, b: np.ndarray, one_directional: bool = False) -> float:
    """Chamfer distance in meters between two point sets.

    Symmetric mode averages the two directed means; one-directional mode
    only measures ``a`` -> ``b``.
    """
    d_ab, _ = cKDTree(b).query(a, k=1)
    if one_directional:
        return float(np.mean(d_ab))
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(0.5 * (np.mean(d_ab) + np.mean(d_ba)))


def chamfer(reconstructed: TriangleMesh, gt: TriangleMesh, samples: int = 10000, seed: int = 0,
            one_directional: bool = False) -> float:
    """Chamfer distance between uniform surface samples, in centimeters.

    Both meshes are sampled with the same seed, so identical meshes give 0.
    """
    if reconstructed.is_empty or gt.is_empty:
        raise ValueError("chamfer needs two non-empty meshes")
    a = reconstructed.sample_surface(samples, seed)
    b = gt.sample_surface(samples, seed)
    return 100.0 * chamfer_points(a, b, one_directional)


@dataclass
class MetricReport:
    add_auc: float
    adds_auc: float
    chamfer: float | None  # cm
    per_frame: list[tuple] = field(default_factory=list)  # (frame_id, add, adds)
    max_threshold: float = DEFAULT_AUC_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "add_auc": self.add_auc,
            "adds_auc": self.adds_auc,
            "chamfer_cm": self.chamfer,
            "max_threshold_m": self.max_threshold,
            "frames": len(self.per_frame),
        }

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("frame_id,add_m,adds_m\n")
            for fid, a, s in self.per_frame:
                fh.write(f"{fid},{a:.6f},{s:.6f}\n")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


class AlignmentError(ValueError):
    pass


def evaluate_poses(estimates: Sequence[Pose], gts: Sequence[Pose], gt_mesh: TriangleMesh,
                   model: TriangleMesh | None = None, n_points: int = 2000,
                   max_threshold: float = DEFAULT_AUC_THRESHOLD, frame_ids=None,
                   chamfer_samples: int = 10000, seed: int = 0) -> MetricReport:
    if len(estimates) != len(gts):
        raise AlignmentError(f"trajectory has {len(estimates)} frames, ground truth {len(gts)}")
    pts = gt_mesh.sample_surface(n_points, seed)
    ids = list(frame_ids) if frame_ids is not None else list(range(len(gts)))
    per_frame = [(fid, add_metric(g, e, pts), adds_metric(g, e, pts)) for fid, g, e in zip(ids, gts, estimates)]
    adds = [p[1] for p in per_frame]
    addss = [p[2] for p in per_frame]
    cd = chamfer(model, gt_mesh, chamfer_samples, seed) if model is not None else None
    return MetricReport(auc(adds, max_threshold), auc(addss, max_threshold), cd, per_frame, max_threshold)
