"""Hybrid object model: a fused mesh plus per-vertex seen/unseen labels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .frame import Frame
from .geom import Intrinsics, Pose, depth_to_points, project_points
from .mesh import TriangleMesh, read_ply, write_ply
from .raster import RenderOutput, default_visibility_eps, face_majority, rasterize, vertex_visibility
from .volume import (
    DEFAULT_PADDING,
    DEFAULT_RESOLUTION,
    DEFAULT_TRUNCATION,
    EmptyMeshError,
    NoObservationError,
    TsdfVolume,
    extract_mesh,
    init_volume,
)


class Provenance(str, Enum):
    FROM_REFERENCES = "from_references"
    FROM_GENERATED = "from_generated"
    REBUILT = "rebuilt"


class NoReferenceError(ValueError):
    pass


class ReconstructionError(RuntimeError):
    pass


class UndefinedRateError(ValueError):
    """Raised when a rendering has no object pixels to measure."""


@dataclass(frozen=True)
class HybridModel:
    mesh: TriangleMesh
    uncertain: np.ndarray  # (V,) bool, True = never seen
    provenance: Provenance = Provenance.FROM_REFERENCES
    build_stamp: int = 0
    reference_poses: tuple = ()
    voxel_size: float | None = None
    face_uncertain: np.ndarray = field(init=False, repr=False)
    face_normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        unc = np.asarray(self.uncertain, dtype=bool).reshape(-1)
        if len(unc) != len(self.mesh.vertices):
            raise ValueError(f"{len(unc)} labels for {len(self.mesh.vertices)} vertices")
        unc.flags.writeable = False
        object.__setattr__(self, "uncertain", unc)
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        fu = face_majority(unc, self.mesh.faces)
        fu.flags.writeable = False
        object.__setattr__(self, "face_uncertain", fu)
        object.__setattr__(self, "face_normals", self.mesh.face_normals())

    @property
    def n_certain(self) -> int:
        return int((~self.uncertain).sum())

    @property
    def visibility_eps(self) -> float:
        return default_visibility_eps(self.mesh, self.voxel_size)

    def certain_fraction(self) -> float:
        """Surface-area fraction of certain geometry (vertex dual areas)."""
        a = self.mesh.vertex_areas()
        total = a.sum()
        return float(a[~self.uncertain].sum() / total) if total > 0 else 0.0

    def render(self, pose: Pose, k: Intrinsics) -> RenderOutput:
        return rasterize(self.mesh, self.uncertain, pose, k, face_uncertain=self.face_uncertain)

    def with_labels(self, uncertain: np.ndarray) -> "HybridModel":
        return HybridModel(self.mesh, uncertain, self.provenance, self.build_stamp, self.reference_poses,
                           self.voxel_size)


# --- confidence metrics -----------------------------------------------------------------

def uncertainty_rate(r: RenderOutput) -> float:
    """Fraction of rendered object pixels that come from unseen geometry."""
    m = np.asarray(r.mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise UndefinedRateError("rendered mask is empty")
    return float(np.count_nonzero(np.asarray(r.uncertainty, dtype=bool) & m) / n)


def seen_iou(r: RenderOutput, test_mask: np.ndarray) -> float:
    """IoU between the certain part of the rendered mask and the observed mask."""
    test_mask = np.asarray(test_mask, dtype=bool)
    if test_mask.shape != r.mask.shape:
        raise ValueError(f"mask shape {test_mask.shape} != render shape {r.mask.shape}")
    seen = np.asarray(r.mask, dtype=bool) & ~np.asarray(r.uncertainty, dtype=bool)
    union = np.count_nonzero(seen | test_mask)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(seen & test_mask) / union)


# --- construction -----------------------------------------------------------------------

def frame_points(frame: Frame) -> np.ndarray:
    """Masked depth pixels back-projected into the object frame."""
    if frame.pose is None:
        raise ValueError(f"frame {frame.frame_id} has no pose")
    pts = depth_to_points(frame.depth, frame.valid, frame.k)
    return frame.pose.inverse().apply(pts)


def fuse_frames(frames: Sequence[Frame], resolution: int = DEFAULT_RESOLUTION,
                truncation: float = DEFAULT_TRUNCATION, padding: float = DEFAULT_PADDING) -> TsdfVolume:
    pts = [frame_points(f) for f in frames]
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    vol = init_volume(pts, padding, resolution, truncation)
    for f in frames:
        vol.integrate(f.color, f.depth, f.mask & (f.depth > 0), f.pose, f.k)
    return vol


def labelling_depth_tol(truncation: float, voxel_size: float) -> float:
    """Depth agreement needed to count a vertex as observed: half the truncation, at least two voxels."""
    return max(0.5 * truncation, 2.0 * voxel_size)


def label_vertices(mesh: TriangleMesh, views: Sequence[Frame], eps: float,
                   depth_tol: float | None = None) -> np.ndarray:
    """Per-vertex uncertainty: True unless some view sees the vertex inside its mask.

    With ``depth_tol`` the view's depth at the vertex pixel must also agree
    with the vertex depth, so hull-closed surface seen edge-on near the
    silhouette is not taken as observed.
    """
    seen = np.zeros(len(mesh.vertices), dtype=bool)
    for f in views:
        vis = vertex_visibility(mesh, f.pose, f.k, reference_mask=f.mask, eps=eps)
        if depth_tol is not None and vis.any():
            idx = np.nonzero(vis)[0]
            cam = mesh.vertices[idx] @ f.pose.rotation.T + f.pose.translation
            uv, z = project_points(cam, f.k)
            col = np.clip(np.round(uv[:, 0]).astype(np.int64), 0, f.k.width - 1)
            row = np.clip(np.round(uv[:, 1]).astype(np.int64), 0, f.k.height - 1)
            d = f.depth[row, col]
            vis[idx] = (d > 0) & (np.abs(z - d) < depth_tol)
        seen |= vis
    return ~seen


def build_model(refs: Sequence[Frame], resolution: int = DEFAULT_RESOLUTION,
                truncation: float = DEFAULT_TRUNCATION, padding: float = DEFAULT_PADDING,
                extra_frames: Sequence[Frame] = (), provenance=Provenance.FROM_REFERENCES,
                build_stamp: int = 0) -> HybridModel:
    """Fuse posed frames, extract a closed mesh and label what the real views saw.

    ``extra_frames`` (e.g. renderings of a generated mesh) are fused into
    the geometry but never mark vertices as certain.
    """
    refs = list(refs)
    if not refs:
        raise NoReferenceError("at least one posed reference frame is required")
    for f in refs:
        if f.pose is None:
            raise NoReferenceError(f"reference {f.frame_id} has no pose")
        if not f.mask.any():
            raise NoReferenceError(f"reference {f.frame_id} has an empty mask")
    try:
        vol = fuse_frames(refs + list(extra_frames), resolution, truncation, padding)
        mesh = extract_mesh(vol)
    except (EmptyMeshError, NoObservationError) as exc:
        raise ReconstructionError(str(exc)) from exc
    except ValueError as exc:  # e.g. truncation thinner than two voxels for this object size
        raise ReconstructionError(f"cannot fuse the frames: {exc}") from exc
    eps = default_visibility_eps(mesh, vol.voxel_size)
    uncertain = label_vertices(mesh, refs, eps, depth_tol=labelling_depth_tol(truncation, vol.voxel_size))
    poses = tuple(f.pose for f in refs)
    return HybridModel(mesh, uncertain, provenance, build_stamp, poses, vol.voxel_size)


# --- persistence ------------------------------------------------------------------------

def save_model(path, model: HybridModel) -> None:
    """PLY with an ``uncertain`` vertex property plus a JSON sidecar."""
    path = Path(path)
    write_ply(path, model.mesh, model.uncertain)
    meta = {
        "provenance": model.provenance.value,
        "build_stamp": model.build_stamp,
        "voxel_size": model.voxel_size,
        "reference_pose_list": [p.to_list() for p in model.reference_poses],
        "certain_fraction": model.certain_fraction(),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_model(path) -> HybridModel:
    path = Path(path)
    mesh, unc = read_ply(path)
    if unc is None:
        unc = np.zeros(len(mesh.vertices), dtype=bool)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    poses = tuple(Pose.from_matrix(m) for m in meta.get("reference_pose_list", []))
    return HybridModel(mesh, unc, meta.get("provenance", Provenance.FROM_REFERENCES),
                       int(meta.get("build_stamp", 0)), poses, meta.get("voxel_size"))
