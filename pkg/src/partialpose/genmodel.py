"""Using an externally generated mesh as the initial object model.

Covers labelling from the single reference view, coarse and fine rescaling
against the first test frame, augmentation renderings with overlap
filtering, and the rule for switching to a rebuilt model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frame import DegenerateObservationError, Frame
from .geom import Intrinsics, Pose, axis_angle_to_matrix, back_project, depth_to_points, geodesic_distance, inplane_rotations, sphere_viewpoints
from .mesh import MeshIngestError, TriangleMesh, point_diameter
from .model import HybridModel, Provenance
from .pose import (
    IcpConfig,
    ScoredPose,
    ScoreWeights,
    Thresholds,
    anchor_translation,
    init_translation,
    pick_best,
    refine_pose,
    score_pose,
)
from .raster import rasterize, vertex_visibility
from .volume import DEFAULT_TRUNCATION

MAX_DIAMETER_POINTS = 2000


@dataclass(frozen=True)
class GeneratedModelInput:
    mesh: TriangleMesh
    reference_image: np.ndarray | None
    reference_mask: np.ndarray
    assumed_reference_pose: Pose
    k: Intrinsics

    def __post_init__(self):
        if self.mesh.is_empty:
            raise MeshIngestError("generated mesh is empty")
        if np.asarray(self.reference_mask).shape != self.k.shape:
            raise ValueError("reference mask does not match the intrinsics")


@dataclass(frozen=True)
class RescaleConfig:
    scale_factors: tuple = tuple(np.round(np.linspace(0.8, 1.2, 11), 10))
    n_view: int = 5
    n_inplane: int = 24
    iterations: int = 3
    view_spread_deg: float = 30.0  # tilt of the extra viewpoints around the reference view
    shrink: float = 0.5  # span multiplier per iteration
    refine_iters: int = 5
    refine_top_k: int = 4  # per scale; 0 refines all

    def __post_init__(self):
        s = np.asarray(self.scale_factors, dtype=np.float64)
        if len(s) == 0 or np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise ValueError("scale factors must be strictly positive and sorted")
        if self.n_view < 1 or self.n_inplane < 1 or self.iterations < 1:
            raise ValueError("view, in-plane and iteration counts must be positive")


@dataclass
class AugmentationSet:
    frames: list[Frame]
    active: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(len(self.frames), dtype=bool)

    def deactivate(self, idx) -> None:
        self.active[idx] = False

    def active_frames(self) -> list[Frame]:
        return [f for f, a in zip(self.frames, self.active) if a]


@dataclass
class RescaleResult:
    model: HybridModel
    scale: float  # relative to the input model
    scored: ScoredPose
    history: list = field(default_factory=list)  # per iteration: [(scale, score)] over the grid

    @property
    def valid(self) -> bool:
        return self.scored.valid


def fit_reference_pose(mesh: TriangleMesh, pose: Pose, mask: np.ndarray, k: Intrinsics, iters: int = 4) -> Pose:
    """Move ``pose`` along its translation so the mesh silhouette matches ``mask``.

    The rotation is kept. Distance follows the silhouette area ratio and the
    lateral offset follows the centroid difference, so a mesh of arbitrary
    scale lands on the reference mask before vertices are labelled.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return pose
    rm, cm = np.nonzero(mask)
    center = mesh.center
    for _ in range(iters):
        sil = rasterize(mesh, None, pose, k).mask
        if not sil.any():
            break
        c = pose.rotation @ center + pose.translation
        if c[2] <= 0:
            break
        c = c * np.sqrt(sil.sum() / mask.sum())
        rr, cr = np.nonzero(sil)
        # centroid shift measured at the old scale is stretched by the depth change
        shift = back_project(cm.mean(), rm.mean(), c[2], k) - back_project(cr.mean(), rr.mean(), c[2], k)
        pose = Pose(pose.rotation, c + shift - pose.rotation @ center)
    return pose


def init_generated_model(inp: GeneratedModelInput, fit_pose: bool = True) -> HybridModel:
    """Label as certain what the assumed reference view sees inside its mask.

    With ``fit_pose`` the reference translation is first fitted to the mask,
    since a generated mesh has no reliable metric scale.
    """
    pose = inp.assumed_reference_pose
    if fit_pose:
        pose = fit_reference_pose(inp.mesh, pose, inp.reference_mask, inp.k)
    vis = vertex_visibility(inp.mesh, pose, inp.k, reference_mask=inp.reference_mask)
    return HybridModel(inp.mesh, ~vis, Provenance.FROM_GENERATED, 0, (pose,))


def is_degenerate(model: HybridModel) -> bool:
    return model.n_certain == 0


def coarse_scale(mesh: TriangleMesh, frame: Frame, seed: int = 0) -> tuple[TriangleMesh, float]:
    """Scale ``mesh`` so its diameter equals the extent of the observed points.

    The observed extent uses at most 2000 uniformly subsampled points.
    """
    pts = depth_to_points(frame.depth, frame.mask, frame.k)
    if len(pts) < 2:
        raise DegenerateObservationError("need at least two valid masked depth pixels")
    if len(pts) > MAX_DIAMETER_POINTS:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), MAX_DIAMETER_POINTS, replace=False))]
    length = point_diameter(pts)
    d = mesh.diameter()
    if d <= 0:
        raise DegenerateObservationError("mesh has zero diameter")
    return mesh.scaled(length / d), float(length)


def rescale_rotations(reference: np.ndarray, cfg: RescaleConfig) -> np.ndarray:
    """Reference view plus tilted neighbours, each with ``n_inplane`` camera rolls."""
    views = [np.asarray(reference, dtype=np.float64)]
    spread = np.deg2rad(cfg.view_spread_deg)
    for j in range(cfg.n_view - 1):
        phi = 2.0 * np.pi * j / (cfg.n_view - 1)
        tilt = axis_angle_to_matrix(spread * np.array([np.cos(phi), np.sin(phi), 0.0]))
        views.append(tilt @ reference)
    rolls = inplane_rotations(cfg.n_inplane)
    return np.einsum("iab,jbc->jiac", rolls, np.stack(views)).reshape(-1, 3, 3)


def _scaled_model(model: HybridModel, s: float) -> HybridModel:
    return HybridModel(model.mesh.scaled(s), model.uncertain, model.provenance, model.build_stamp,
                       model.reference_poses, model.voxel_size)


def _best_at_scale(model: HybridModel, frame: Frame, rotations: np.ndarray, cfg: RescaleConfig,
                   th: Thresholds, weights: ScoreWeights, icp: IcpConfig, truncation: float) -> ScoredPose:
    center = model.mesh.center
    t0 = init_translation(frame.depth, frame.mask, frame.k)
    cands = []
    for i, r in enumerate(rotations):
        p = Pose(r, t0 - r @ center)
        rend = model.render(p, frame.k)
        p = anchor_translation(frame, p, rend)
        cands.append(score_pose(model, frame, p, th, weights, truncation, icp.max_corr_dist, i))
    if 0 < cfg.refine_top_k < len(cands):
        cands = sorted(cands, key=lambda c: (-c.score, c.index))[: cfg.refine_top_k]
    out = []
    for c in cands:
        rr = refine_pose(model, frame, c.pose, cfg.refine_iters, icp)
        out.append(score_pose(model, frame, rr.pose, th, weights, truncation, icp.max_corr_dist, c.index))
    return pick_best(out)


def fine_scale(model: HybridModel, frame: Frame, cfg: RescaleConfig = RescaleConfig(),
               th: Thresholds = Thresholds(), weights: ScoreWeights = ScoreWeights(),
               icp: IcpConfig | None = None, truncation: float = DEFAULT_TRUNCATION,
               reference_rotation: np.ndarray | None = None) -> RescaleResult:
    """Grid search over scale factors, re-centred on the winner each iteration.

    Every scale gets its own set of refined pose hypotheses around the
    reference view; the (scale, pose) pair with the best score wins. The
    grid span relative to the current winner shrinks by ``cfg.shrink``.
    """
    icp = icp or IcpConfig()
    if reference_rotation is None:
        reference_rotation = model.reference_poses[0].rotation if model.reference_poses else np.eye(3)
    rotations = rescale_rotations(reference_rotation, cfg)
    rel = np.asarray(cfg.scale_factors, dtype=np.float64) - 1.0
    current = 1.0
    best: ScoredPose | None = None
    history = []
    for it in range(cfg.iterations):
        factors = current * (1.0 + rel * cfg.shrink ** it)
        results = []
        for s in factors:
            sp = _best_at_scale(_scaled_model(model, s), frame, rotations, cfg, th, weights, icp, truncation)
            results.append((float(s), sp))
        history.append([(s, sp.score) for s, sp in results])
        valid = [(s, sp) for s, sp in results if sp.valid]
        pool = valid if valid else results
        key = (lambda x: -x[1].score) if valid else (lambda x: -x[1].seen_iou)
        s_best, sp_best = min(pool, key=key)
        current, best = s_best, sp_best
    return RescaleResult(_scaled_model(model, current), current, best, history)


def render_augmentation(model: HybridModel, k: Intrinsics, n: int = 24, distance_factor: float = 2.5) -> AugmentationSet:
    """Render the model from ``n`` viewpoints spread over a sphere around its centre."""
    if model.mesh.is_empty:
        raise MeshIngestError("cannot render an empty model")
    center = model.mesh.center
    dist = distance_factor * model.mesh.diameter()
    frames = []
    for i, r in enumerate(sphere_viewpoints(n).rotations):
        pose = Pose(r, np.array([0.0, 0.0, dist]) - r @ center)
        out = rasterize(model.mesh, None, pose, k)
        frames.append(Frame(out.color, out.depth, out.mask, k, pose, f"aug{i:02d}", augmented=True))
    return AugmentationSet(frames)


def certain_overlap(frame: Frame, model: HybridModel) -> float:
    """Fraction of the frame's mask covered by certain geometry of ``model``."""
    n = int(frame.mask.sum())
    if n == 0:
        return 0.0
    r = model.render(frame.pose, frame.k)
    certain = r.mask & ~r.uncertainty
    return float(np.count_nonzero(frame.mask & certain) / n)


def filter_augmentation(aug: AugmentationSet, current: HybridModel, max_overlap: float = 0.3) -> AugmentationSet:
    """Deactivate augmented views already mostly explained by certain geometry."""
    for i, f in enumerate(aug.frames):
        if aug.active[i] and certain_overlap(f, current) > max_overlap:
            aug.deactivate(i)
    return aug


def should_switch(initial_pose: Pose, current_pose: Pose, th: Thresholds) -> bool:
    return geodesic_distance(initial_pose.rotation, current_pose.rotation) > th.t_gen
