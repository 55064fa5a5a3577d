"""End-to-end loop: initial model, per-frame pose estimation, pool and completion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bench import MetricReport, evaluate_poses
from .completion import MemoryPool, RebuildResult, needs_completion, rebuild, sample_frames, try_admit
from .config import PipelineConfig
from .frame import Frame
from .genmodel import (
    AugmentationSet,
    GeneratedModelInput,
    coarse_scale,
    filter_augmentation,
    fine_scale,
    init_generated_model,
    render_augmentation,
    should_switch,
)
from .geom import Pose, depth_to_points
from .mesh import TriangleMesh
from .model import HybridModel, Provenance, build_model
from .pose import ScoredPose, can_track, estimate_pose, refine_pose, score_pose, track_frame

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Ablation:
    """Switches for the component ablations; all off is the full method."""

    no_completion: bool = False
    always_complete: bool = False
    no_filter: bool = False
    geodesic_sampling: bool = False

    @property
    def name(self) -> str:
        on = [k for k in ("no_completion", "always_complete", "no_filter", "geodesic_sampling") if getattr(self, k)]
        return "+".join(on) if on else "full"


@dataclass
class FrameRecord:
    frame_id: int | str
    pose: Pose
    seen_iou: float
    uncertainty_rate: float
    valid: bool
    mode: str  # "reinit" or "tracked"
    build_stamp: int
    admitted: bool = False
    admission: str = ""
    rebuilt: bool = False

    def to_json(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "pose": self.pose.to_list(),
            "seen_iou": self.seen_iou,
            "uncertainty_rate": self.uncertainty_rate,
            "valid": self.valid,
            "tracked_or_reinit": self.mode,
            "build_stamp": self.build_stamp,
            "admitted": self.admitted,
            "admission": self.admission,
            "rebuilt": self.rebuilt,
        }


@dataclass
class PipelineResult:
    records: list[FrameRecord]
    model: HybridModel
    initial_model: HybridModel
    rebuild_log: list[dict] = field(default_factory=list)
    pool_ids: list = field(default_factory=list)
    canonical_pose: Pose | None = None  # first-frame-init: frame 0 pose that defines the object frame
    pool: MemoryPool | None = None
    augmentation: AugmentationSet | None = None

    @property
    def poses(self) -> list[Pose]:
        return [r.pose for r in self.records]

    @property
    def n_rebuild(self) -> int:
        return sum(1 for r in self.rebuild_log if r["ok"])

    @property
    def n_admitted(self) -> int:
        return sum(1 for r in self.records if r.admitted)


class PipelineInputError(ValueError):
    pass


def first_frame_model(frame: Frame, cfg: PipelineConfig) -> tuple[HybridModel, Pose]:
    """Model from test frame 0 alone; the object frame is the camera frame shifted to the point centroid."""
    pts = depth_to_points(frame.depth, frame.mask, frame.k)
    if len(pts) == 0:
        raise PipelineInputError(f"frame {frame.frame_id} has no valid masked depth")
    p0 = Pose(np.eye(3), pts.mean(axis=0))
    v = cfg.volume
    model = build_model([frame.with_pose(p0)], v.resolution, v.truncation, v.padding)
    return model, p0


def run_pipeline(config: PipelineConfig, frames: Sequence[Frame], references: Sequence[Frame] | None = None,
                 generated: GeneratedModelInput | None = None, first_frame_init: bool = False,
                 ablation: Ablation = Ablation(),
                 progress: Callable[[FrameRecord], None] | None = None) -> PipelineResult:
    """Estimate a pose for every frame, completing the model when confidence drops."""
    frames = list(frames)
    if not frames:
        raise PipelineInputError("test sequence is empty")
    sources = sum([bool(references), generated is not None, bool(first_frame_init)])
    if sources != 1:
        raise PipelineInputError("provide exactly one of references, a generated model or first-frame init")
    if not frames[0].mask.any():
        raise PipelineInputError(f"first frame {frames[0].frame_id} has an empty mask")

    cfg = config
    th = cfg.thresholds
    v = cfg.volume
    refs = list(references or [])
    aug: AugmentationSet | None = None
    canonical = None
    first: ScoredPose | None = None

    if refs:
        model = build_model(refs, v.resolution, v.truncation, v.padding)
    elif generated is not None:
        model0 = init_generated_model(generated)
        scaled, _ = coarse_scale(model0.mesh, frames[0], cfg.seed)
        model0 = HybridModel(scaled, model0.uncertain, Provenance.FROM_GENERATED, 0, model0.reference_poses)
        res = fine_scale(model0, frames[0], cfg.rescale, th, cfg.score_weights, cfg.icp, v.truncation)
        model, first = res.model, res.scored
        aug = render_augmentation(model, frames[0].k, cfg.augmentation.n_views, cfg.augmentation.distance_factor)
    else:
        model, canonical = first_frame_model(frames[0], cfg)
        first = score_pose(model, frames[0], canonical, th, cfg.score_weights, v.truncation, cfg.icp.max_corr_dist)

    initial = model
    pool = MemoryPool(cfg.pool_capacity)
    records: list[FrameRecord] = []
    rebuild_log: list[dict] = []
    last_rebuild_version = 0
    initial_pose: Pose | None = None
    prev: ScoredPose | None = None
    strategy = "geodesic" if ablation.geodesic_sampling else cfg.sampling.strategy

    for i, frame in enumerate(frames):
        if i == 0 and first is not None:
            scored, mode = first, "reinit"
        elif prev is not None and can_track(prev, th, allow_uncertain=True):
            # a pose rejected only for covering unseen geometry is kept; completion will fill that in
            scored, mode = track_frame(model, prev, frame, cfg.hypothesis, th, cfg.score_weights, cfg.icp,
                                       v.truncation, allow_uncertain=True), "tracked"
        else:
            scored, mode = estimate_pose(model, frame, cfg.hypothesis, th, cfg.score_weights, cfg.icp,
                                         v.truncation), "reinit"
        if initial_pose is None:
            initial_pose = scored.pose

        adm = try_admit(pool, frame, scored, th, confidence_filter=not ablation.no_filter)

        rebuilt = False
        if not ablation.no_completion:
            if ablation.always_complete:
                trigger = adm.admitted
            else:
                trigger = needs_completion(scored, th) and pool.version != last_rebuild_version
            if trigger and model.provenance == Provenance.FROM_GENERATED:
                trigger = should_switch(initial_pose, scored.pose, th)
            if trigger:
                result = _complete(model, pool, refs, aug, cfg, strategy)
                last_rebuild_version = pool.version
                rebuild_log.append(result.log_record(frame.frame_id))
                if result.ok:
                    model = result.model
                    rebuilt = True
                    # labels changed, so re-score the current estimate against the new model
                    rr = refine_pose(model, frame, scored.pose, cfg.hypothesis.refine_iters_track, cfg.icp)
                    scored = score_pose(model, frame, rr.pose, th, cfg.score_weights, v.truncation,
                                        cfg.icp.max_corr_dist)
                else:
                    log.warning("rebuild at frame %s failed: %s", frame.frame_id, result.error)

        rec = FrameRecord(frame.frame_id, scored.pose, scored.seen_iou, scored.uncertainty_rate, scored.valid,
                          mode, model.build_stamp, adm.admitted, adm.reason, rebuilt)
        records.append(rec)
        if progress is not None:
            progress(rec)
        prev = scored

    return PipelineResult(records, model, initial, rebuild_log, [e.frame_id for e in pool.entries], canonical,
                          pool, aug)


def _complete(model: HybridModel, pool: MemoryPool, refs: list[Frame], aug: AugmentationSet | None,
              cfg: PipelineConfig, strategy: str) -> RebuildResult:
    sampling = sample_frames(pool, model, cfg.sampling_k, strategy, cfg.sampling.area_weighted)
    extra = []
    if aug is not None:
        filter_augmentation(aug, model, cfg.augmentation.max_overlap)
        extra = aug.active_frames()
    v = cfg.volume
    return rebuild(pool, sampling, model, refs, extra, v.resolution, v.truncation, v.padding)


def evaluate(result: PipelineResult, gt_poses: Sequence[Pose], gt_mesh: TriangleMesh,
             with_chamfer: bool = True, **kwargs) -> MetricReport:
    """Metrics of a pipeline run against ground truth.

    For first-frame runs the estimated trajectory lives in the object frame
    defined by frame 0, so it is mapped back through the frame-0 ground truth.
    """
    est = result.poses
    model_mesh = result.model.mesh
    if result.canonical_pose is not None:
        align = result.canonical_pose.inverse() @ gt_poses[0]  # gt object -> canonical object
        est = [p @ align for p in est]
        model_mesh = model_mesh.transformed(align.inverse())
    ids = [r.frame_id for r in result.records]
    return evaluate_poses(est, gt_poses, gt_mesh, model_mesh if with_chamfer else None, frame_ids=ids, **kwargs)
