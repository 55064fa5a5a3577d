"""Uncertainty-aware pose estimation against a hybrid model.

Hypotheses come from sphere viewpoints times in-plane rolls, each is refined
with damped point-to-plane ICP on certain geometry only, and candidates are
gated by uncertainty rate and seen IoU before residual-based ranking.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .frame import DegenerateObservationError, Frame
from .geom import Intrinsics, Pose, axis_angle_to_matrix, back_project, inplane_rotations, orthonormalize, sphere_viewpoints
from .model import HybridModel, UndefinedRateError, seen_iou, uncertainty_rate
from .raster import EmptyModelError, RenderOutput
from .volume import DEFAULT_TRUNCATION


@dataclass(frozen=True)
class HypothesisConfig:
    n_viewpoints: int = 42
    n_inplane: int = 12
    refine_iters_first: int = 5
    refine_iters_track: int = 2
    # 0 refines every hypothesis; otherwise only the best-scoring ones after
    # a render-only screening pass
    refine_top_k: int = 24

    def __post_init__(self):
        if self.n_viewpoints < 1 or self.n_inplane < 1:
            raise ValueError("need at least one viewpoint and one in-plane rotation")
        if self.refine_iters_first < 0 or self.refine_iters_track < 0 or self.refine_top_k < 0:
            raise ValueError("iteration counts must be non-negative")


@dataclass(frozen=True)
class Thresholds:
    t_u: float = 0.5
    t_s: float = 0.5
    t_conf: float = 0.5
    t_complete: float = 0.7
    t_geo: float = float(np.deg2rad(10.0))
    t_gen: float = float(np.deg2rad(45.0))

    def violations(self) -> list[str]:
        out = []
        for name in ("t_u", "t_s", "t_conf", "t_complete"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"thresholds.{name}={v} must lie in [0, 1]")
        for name in ("t_geo", "t_gen"):
            v = getattr(self, name)
            if not 0.0 < v <= np.pi:
                out.append(f"thresholds.{name}={v} must lie in (0, pi]")
        return out

    def __post_init__(self):
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(bad))


@dataclass(frozen=True)
class ScoreWeights:
    w_g: float = 1.0
    w_p: float = 0.5


@dataclass(frozen=True)
class IcpConfig:
    huber_delta: float = 0.005  # m
    max_corr_dist: float = 0.03  # m, reject pairs farther apart
    min_corr: int = 10
    degenerate_ratio: float = 1e-4  # smallest / largest eigenvalue of the normal scatter
    lm_init: float = 1e-4
    max_backtracks: int = 8
    # meters per unit intensity difference; 0 gives pure point-to-plane ICP
    photometric_scale: float = 0.02


@dataclass
class ScoredPose:
    pose: Pose
    seen_iou: float
    uncertainty_rate: float
    geometric_residual: float
    photometric_residual: float
    score: float
    valid: bool
    index: int = 0
    degenerate: bool = False

    def rescaled(self, factor: float) -> "ScoredPose":
        return replace(self, score=self.score * factor)


@dataclass
class RefineResult:
    pose: Pose
    degenerate: bool = False
    n_corr: int = 0
    objective: list = field(default_factory=list)  # (before, after) per iteration


# --- hypotheses ------------------------------------------------------------------------

def init_translation(depth: np.ndarray, mask: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Back-project the mask centroid at the median of the valid masked depths."""
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=np.float64)
    valid = mask & (depth > 0)
    if not valid.any():
        raise DegenerateObservationError("no valid depth inside the object mask")
    rows, cols = np.nonzero(mask)
    z = float(np.median(depth[valid]))
    return back_project(cols.mean(), rows.mean(), z, k)


def hypothesis_rotations(cfg: HypothesisConfig) -> np.ndarray:
    """Viewpoint-major list of object-to-camera rotations (roll applied in the camera frame)."""
    views = sphere_viewpoints(cfg.n_viewpoints).rotations
    rolls = inplane_rotations(cfg.n_inplane)
    return np.einsum("iab,jbc->jiac", rolls, views).reshape(-1, 3, 3)


def generate_hypotheses(model: HybridModel, frame: Frame, cfg: HypothesisConfig) -> list[Pose]:
    """``n_viewpoints * n_inplane`` poses placing the model centre at the initial translation."""
    t0 = init_translation(frame.depth, frame.mask, frame.k)
    center = model.mesh.center
    return [Pose(r, t0 - r @ center) for r in hypothesis_rotations(cfg)]


def anchor_translation(frame: Frame, pose: Pose, render: RenderOutput) -> Pose:
    """Shift ``pose`` so the rendered mask centroid and median depth match the observation.

    Returns the pose unchanged when either mask has no valid depth.
    """
    obs = frame.valid
    if not obs.any() or not render.mask.any():
        return pose
    k = frame.k
    ro, co = np.nonzero(frame.mask)
    rr, cr = np.nonzero(render.mask)
    target = back_project(co.mean(), ro.mean(), float(np.median(frame.depth[obs])), k)
    current = back_project(cr.mean(), rr.mean(), float(np.median(render.depth[render.mask])), k)
    return Pose(pose.rotation, pose.translation + (target - current))


# --- ICP -----------------------------------------------------------------------------------

def _huber(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


@dataclass
class Correspondences:
    model_pts: np.ndarray  # camera frame, current pose
    normals: np.ndarray  # camera frame
    frame_pts: np.ndarray
    pixels: tuple
    model_gray: np.ndarray | None = None  # rendered intensity per pair
    photo_ok: np.ndarray | None = None  # pairs usable for the photometric term


@dataclass
class FrameImage:
    """Observed intensity and its gradients, shared by all ICP rounds on a frame."""

    gray: np.ndarray
    gx: np.ndarray  # d gray / d column
    gy: np.ndarray  # d gray / d row
    interior: np.ndarray  # mask pixels whose 3x3 neighbourhood is inside the mask

    @classmethod
    def of(cls, frame: Frame) -> "FrameImage":
        gray = frame.color.mean(axis=2)
        gx = ndimage.sobel(gray, axis=1) / 8.0
        gy = ndimage.sobel(gray, axis=0) / 8.0
        interior = ndimage.binary_erosion(frame.mask, structure=np.ones((3, 3), dtype=bool))
        return cls(gray, gx, gy, interior)


def associate(model: HybridModel, frame: Frame, pose: Pose, render: RenderOutput | None = None,
              max_dist: float = np.inf, image: FrameImage | None = None) -> tuple[Correspondences, RenderOutput]:
    """Projective association: rendered certain pixels paired with observed pixels."""
    k = frame.k
    if render is None:
        render = model.render(pose, k)
    sel = render.mask & ~render.uncertainty & frame.valid
    rows, cols = np.nonzero(sel)
    p_model = back_project(cols, rows, render.depth[rows, cols], k)
    p_frame = back_project(cols, rows, frame.depth[rows, cols], k)
    fid = render.face_id[rows, cols]
    n_obj = model.face_normals[fid]
    n_cam = n_obj @ pose.rotation.T
    keep = np.linalg.norm(p_model - p_frame, axis=1) < max_dist
    rows, cols = rows[keep], cols[keep]
    corr = Correspondences(p_model[keep], n_cam[keep], p_frame[keep], (rows, cols))
    if image is not None:
        corr.model_gray = render.color[rows, cols].mean(axis=1)
        # keep away from the rendered silhouette too, where colours blend with nothing
        inner = ndimage.binary_erosion(render.mask, structure=np.ones((3, 3), dtype=bool))
        corr.photo_ok = image.interior[rows, cols] & inner[rows, cols]
    return corr, render


def normals_degenerate(normals: np.ndarray, ratio: float) -> bool:
    if len(normals) < 3:
        return True
    ev = np.linalg.eigvalsh(normals.T @ normals / len(normals))
    return bool(ev[0] < ratio * max(ev[2], 1e-300))


def _photo_residuals(corr: Correspondences, moved: np.ndarray, image: FrameImage, k: Intrinsics,
                     scale: float) -> np.ndarray:
    p = moved[corr.photo_ok]
    u = k.fx * p[:, 0] / p[:, 2] + k.cx
    v = k.fy * p[:, 1] / p[:, 2] + k.cy
    obs = ndimage.map_coordinates(image.gray, [v, u], order=1, mode="nearest")
    return scale * (obs - corr.model_gray[corr.photo_ok])


def icp_objective(corr: Correspondences, t: np.ndarray, d_rot: np.ndarray, d_t: np.ndarray,
                  delta: float, image: FrameImage | None = None, k: Intrinsics | None = None,
                  photo_scale: float = 0.0) -> float:
    """Huber cost after moving model points by (d_rot about t, d_t).

    Point-to-plane distances, plus (when an image is given) intensity
    differences scaled to meters by ``photo_scale``.
    """
    moved = (corr.model_pts - t) @ d_rot.T + t + d_t
    r = np.einsum("ij,ij->i", corr.normals, moved - corr.frame_pts)
    cost = float(_huber(r, delta).sum())
    if image is not None and photo_scale > 0 and corr.photo_ok is not None and corr.photo_ok.any():
        cost += float(_huber(_photo_residuals(corr, moved, image, k, photo_scale), delta).sum())
    return cost


def _robust_normal_equations(jac: np.ndarray, r: np.ndarray, delta: float):
    absr = np.abs(r)
    w = np.where(absr <= delta, 1.0, delta / np.maximum(absr, 1e-300))
    return jac.T @ (jac * w[:, None]), jac.T @ (w * r)


def icp_step(corr: Correspondences, pose: Pose, cfg: IcpConfig, image: FrameImage | None = None,
             k: Intrinsics | None = None) -> tuple[Pose, float, float]:
    """One robust Gauss-Newton solve with Levenberg-Marquardt backtracking.

    The update rotates about the current object origin in the camera frame:
    ``R+ = dR R``, ``t+ = t + dt``. The step is only taken when it lowers the
    Huber objective on the fixed correspondences, so the cost never rises.
    """
    t = pose.translation
    a = corr.model_pts - t
    n = corr.normals
    r = np.einsum("ij,ij->i", n, corr.model_pts - corr.frame_pts)
    h, g = _robust_normal_equations(np.hstack([np.cross(a, n), n]), r, cfg.huber_delta)
    scale = cfg.photometric_scale
    use_photo = image is not None and scale > 0 and corr.photo_ok is not None and corr.photo_ok.any()
    if use_photo:
        p = corr.model_pts[corr.photo_ok]
        rows, cols = corr.pixels[0][corr.photo_ok], corr.pixels[1][corr.photo_ok]
        z = p[:, 2]
        gu = image.gx[rows, cols]
        gv = image.gy[rows, cols]
        # chain rule: intensity gradient times the projection Jacobian
        grad = scale * np.stack(
            [gu * k.fx / z, gv * k.fy / z, -(gu * k.fx * p[:, 0] + gv * k.fy * p[:, 1]) / (z * z)], axis=1
        )
        rp = _photo_residuals(corr, corr.model_pts, image, k, scale)
        hp, gp = _robust_normal_equations(np.hstack([np.cross(a[corr.photo_ok], grad), grad]), rp, cfg.huber_delta)
        h, g = h + hp, g + gp
    e0 = icp_objective(corr, t, np.eye(3), np.zeros(3), cfg.huber_delta, image if use_photo else None, k, scale)
    mu = cfg.lm_init * max(np.trace(h) / 6.0, 1e-12)
    for _ in range(cfg.max_backtracks):
        try:
            x = np.linalg.solve(h + mu * np.diag(np.diag(h) + 1e-12), -g)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        d_rot = axis_angle_to_matrix(x[:3])
        e1 = icp_objective(corr, t, d_rot, x[3:], cfg.huber_delta, image if use_photo else None, k, scale)
        if e1 <= e0:
            new = Pose(orthonormalize(d_rot @ pose.rotation), t + x[3:])
            return new, e0, e1
        mu *= 10.0
    return pose, e0, e0


def refine_pose(model: HybridModel, frame: Frame, hypothesis: Pose, iters: int,
                cfg: IcpConfig | None = None) -> RefineResult:
    """ICP between certain model geometry and the observed points.

    Each round re-associates pixels projectively and takes one robust
    point-to-plane step; with ``cfg.photometric_scale > 0`` the step also
    aligns rendered and observed intensities (a colored-ICP term), which
    pins down sliding along flat faces that depth alone leaves free.
    """
    cfg = cfg or IcpConfig()
    pose = hypothesis
    res = RefineResult(pose)
    image = FrameImage.of(frame) if cfg.photometric_scale > 0 and iters > 0 else None
    for _ in range(iters):
        try:
            corr, _ = associate(model, frame, pose, max_dist=cfg.max_corr_dist, image=image)
        except EmptyModelError:
            res.degenerate = True
            break
        res.n_corr = len(corr.frame_pts)
        if res.n_corr < cfg.min_corr or normals_degenerate(corr.normals, cfg.degenerate_ratio):
            res.degenerate = True
            break
        pose, e0, e1 = icp_step(corr, pose, cfg, image, frame.k)
        res.objective.append((e0, e1))
        if e1 >= e0:
            break
    res.pose = pose
    return res


# --- scoring and selection -------------------------------------------------------------------

def score_pose(model: HybridModel, frame: Frame, pose: Pose, th: Thresholds,
               weights: ScoreWeights = ScoreWeights(), truncation: float = DEFAULT_TRUNCATION,
               max_corr_dist: float = IcpConfig.max_corr_dist, index: int = 0,
               render: RenderOutput | None = None) -> ScoredPose:
    """Render ``pose`` and compute gating metrics plus the ranking score."""
    if render is None:
        render = model.render(pose, frame.k)
    try:
        rate = uncertainty_rate(render)
    except UndefinedRateError:
        return ScoredPose(pose, 0.0, 1.0, np.inf, np.inf, -np.inf, False, index)
    siou = seen_iou(render, frame.mask)
    corr, _ = associate(model, frame, pose, render=render, max_dist=max_corr_dist)
    if len(corr.frame_pts):
        d = np.einsum("ij,ij->i", corr.normals, corr.model_pts - corr.frame_pts)
        geo = float(np.sqrt(np.mean(d * d)))
        rows, cols = corr.pixels
        photo = float(np.abs(render.color[rows, cols] - frame.color[rows, cols]).mean())
    else:
        geo = max_corr_dist
        photo = 1.0
    score = siou - weights.w_g * geo / truncation - weights.w_p * photo
    valid = siou >= th.t_s and rate <= th.t_u
    return ScoredPose(pose, siou, rate, geo, photo, float(score), bool(valid), index)


def pick_best(candidates: list[ScoredPose]) -> ScoredPose:
    """Highest score among valid candidates, else the highest seen IoU flagged invalid.

    Ties go to the lowest hypothesis index.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    valid = [c for c in candidates if c.valid]
    if valid:
        return min(valid, key=lambda c: (-c.score, c.index))
    best = min(candidates, key=lambda c: (-c.seen_iou, c.index))
    return replace(best, valid=False)


def select_pose(model: HybridModel, frame: Frame, hypotheses: list[Pose], th: Thresholds,
                weights: ScoreWeights = ScoreWeights(), truncation: float = DEFAULT_TRUNCATION,
                indices: list[int] | None = None) -> ScoredPose:
    if not hypotheses:
        raise ValueError("no hypotheses to select from")
    idx = indices if indices is not None else range(len(hypotheses))
    scored = [score_pose(model, frame, p, th, weights, truncation, index=i) for i, p in zip(idx, hypotheses)]
    return pick_best(scored)


def estimate_pose(model: HybridModel, frame: Frame, cfg: HypothesisConfig, th: Thresholds,
                  weights: ScoreWeights = ScoreWeights(), icp: IcpConfig | None = None,
                  truncation: float = DEFAULT_TRUNCATION) -> ScoredPose:
    """Full re-initialisation: generate, anchor, refine and select.

    Each hypothesis is first translated so its rendering lines up with the
    observed mask centroid and median depth. With ``cfg.refine_top_k > 0`` every hypothesis is first scored as-is and
    only the top-k (by score, gating ignored) go through ICP.
    """
    icp = icp or IcpConfig()
    hyps = []
    for p in generate_hypotheses(model, frame, cfg):
        r = model.render(p, frame.k)
        hyps.append(anchor_translation(frame, p, r))
    order = list(range(len(hyps)))
    if 0 < cfg.refine_top_k < len(hyps):
        pre = [score_pose(model, frame, p, th, weights, truncation, icp.max_corr_dist, i) for i, p in enumerate(hyps)]
        order = sorted(order, key=lambda i: (-pre[i].score, i))[: cfg.refine_top_k]
        order.sort()
    refined = []
    for i in order:
        rr = refine_pose(model, frame, hyps[i], cfg.refine_iters_first, icp)
        sp = score_pose(model, frame, rr.pose, th, weights, truncation, icp.max_corr_dist, i)
        sp.degenerate = rr.degenerate
        refined.append(sp)
    return pick_best(refined)


def can_track(prev: ScoredPose, th: Thresholds, allow_uncertain: bool = False) -> bool:
    if prev.valid:
        return True
    return allow_uncertain and np.isfinite(prev.score) and prev.seen_iou >= th.t_s


def track_frame(model: HybridModel, prev: ScoredPose, frame: Frame, cfg: HypothesisConfig,
                th: Thresholds, weights: ScoreWeights = ScoreWeights(), icp: IcpConfig | None = None,
                truncation: float = DEFAULT_TRUNCATION, allow_uncertain: bool = False) -> ScoredPose:
    """Refine the previous pose for a few iterations and re-score it.

    :param allow_uncertain: also accept a previous pose that failed only the
        uncertainty-rate gate, i.e. one whose seen region still matches the mask.
    """
    if not can_track(prev, th, allow_uncertain):
        raise ValueError("tracking needs a valid previous pose; re-initialise instead")
    icp = icp or IcpConfig()
    rr = refine_pose(model, frame, prev.pose, cfg.refine_iters_track, icp)
    sp = score_pose(model, frame, rr.pose, th, weights, truncation, icp.max_corr_dist)
    sp.degenerate = rr.degenerate
    return sp
