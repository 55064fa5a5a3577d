"""Keyframe memory pool, uncertainty-aware frame sampling and model rebuilds."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .frame import Frame
from .geom import Pose, geodesic_distance
from .model import HybridModel, Provenance, ReconstructionError, build_model
from .pose import ScoredPose, Thresholds
from .raster import vertex_visibility
from .volume import DEFAULT_PADDING, DEFAULT_RESOLUTION, DEFAULT_TRUNCATION

DEFAULT_CAPACITY = 30


class InvalidKError(ValueError):
    pass


@dataclass(frozen=True)
class PoolEntry:
    frame_id: int | str
    frame: Frame  # carries the estimated pose
    seen_iou: float

    @property
    def pose(self) -> Pose:
        return self.frame.pose


@dataclass
class MemoryPool:
    capacity: int = DEFAULT_CAPACITY
    entries: list[PoolEntry] = field(default_factory=list)
    version: int = 0  # bumped on every admission

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    @property
    def last(self) -> PoolEntry | None:
        return self.entries[-1] if self.entries else None


@dataclass(frozen=True)
class Admission:
    admitted: bool
    reason: str  # "first", "admitted", "diversity", "confidence" or "full"


def try_admit(pool: MemoryPool, frame: Frame, scored: ScoredPose, th: Thresholds,
              confidence_filter: bool = True) -> Admission:
    """Add ``frame`` with its estimated pose when it is diverse and confident enough.

    The first frame is always admitted. ``confidence_filter=False`` drops the
    seen-IoU check (the image-filtering ablation).
    """
    if not np.all(np.isfinite(scored.pose.matrix)):
        raise ValueError("scored pose is not finite")
    entry = PoolEntry(frame.frame_id, frame.with_pose(scored.pose), float(scored.seen_iou))
    if not pool.entries:
        pool.entries.append(entry)
        pool.version += 1
        return Admission(True, "first")
    if pool.full:
        return Admission(False, "full")
    if geodesic_distance(scored.pose.rotation, pool.last.pose.rotation) <= th.t_geo:
        return Admission(False, "diversity")
    if confidence_filter and scored.seen_iou < th.t_conf:
        return Admission(False, "confidence")
    pool.entries.append(entry)
    pool.version += 1
    return Admission(True, "admitted")


def needs_completion(scored: ScoredPose, th: Thresholds) -> bool:
    return scored.seen_iou < th.t_complete


@dataclass
class SamplingResult:
    selected: list[int]
    newly_revealed: list[float]


def reveal_sets(pool: MemoryPool, model: HybridModel) -> list[np.ndarray]:
    """For each entry, the model's uncertain vertices visible from its viewpoint."""
    eps = model.visibility_eps
    out = []
    for e in pool.entries:
        vis = vertex_visibility(model.mesh, e.pose, e.frame.k, reference_mask=e.frame.mask, eps=eps)
        out.append(vis & model.uncertain)
    return out


def greedy_cover(sets: Sequence[np.ndarray], k: int, weights: np.ndarray | None = None) -> SamplingResult:
    """Seed with the first and last sets, then repeatedly take the largest new gain.

    Ties go to the lowest index.
    """
    n = len(sets)
    if n == 0:
        raise ValueError("pool is empty")
    if n <= k:
        return SamplingResult(list(range(n)), [float("nan")] * n)
    if k < 2:
        raise InvalidKError("K must be at least 2 to hold the first and latest frames")
    w = np.ones(len(sets[0])) if weights is None else np.asarray(weights, dtype=np.float64)
    selected = [0, n - 1]
    revealed = sets[0] | sets[n - 1]
    gains = [float(w[sets[0]].sum()), float(w[sets[n - 1] & ~sets[0]].sum())]
    while len(selected) < k:
        best, best_gain = -1, -1.0
        for i in range(n):
            if i in selected:
                continue
            g = float(w[sets[i] & ~revealed].sum())
            if g > best_gain:
                best, best_gain = i, g
        selected.append(best)
        gains.append(best_gain)
        revealed |= sets[best]
    return SamplingResult(selected, gains)


def geodesic_cover(rotations: Sequence[np.ndarray], k: int) -> SamplingResult:
    """Farthest-rotation sampling seeded with the first and last entries."""
    n = len(rotations)
    if n == 0:
        raise ValueError("pool is empty")
    if n <= k:
        return SamplingResult(list(range(n)), [float("nan")] * n)
    if k < 2:
        raise InvalidKError("K must be at least 2 to hold the first and latest frames")
    selected = [0, n - 1]
    dmin = np.array([min(geodesic_distance(r, rotations[0]), geodesic_distance(r, rotations[-1])) for r in rotations])
    dmin[selected] = -1.0
    gains = [float("nan"), float("nan")]
    while len(selected) < k:
        best = int(np.argmax(dmin))
        selected.append(best)
        gains.append(float(dmin[best]))
        dmin = np.minimum(dmin, [geodesic_distance(r, rotations[best]) for r in rotations])
        dmin[selected] = -1.0
    return SamplingResult(selected, gains)


def sample_frames(pool: MemoryPool, model: HybridModel, k: int = 10, strategy: str = "uncertainty",
                  area_weighted: bool = False) -> SamplingResult:
    """Choose up to ``k`` pool entries for a rebuild.

    ``strategy="uncertainty"`` greedily maximises newly revealed uncertain
    vertices (optionally weighted by their surface area); ``"geodesic"``
    spreads the picks over rotation space instead.
    """
    if not pool.entries:
        raise ValueError("pool is empty")
    if strategy == "geodesic":
        return geodesic_cover([e.pose.rotation for e in pool.entries], k)
    if strategy != "uncertainty":
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    if len(pool) <= k:
        return SamplingResult(list(range(len(pool))), [float("nan")] * len(pool))
    sets = reveal_sets(pool, model)
    weights = model.mesh.vertex_areas() if area_weighted else None
    return greedy_cover(sets, k, weights)


@dataclass
class RebuildResult:
    model: HybridModel
    ok: bool
    selected_ids: list
    duration: float
    certain_before: float
    certain_after: float
    error: str | None = None

    def log_record(self, trigger_frame) -> dict:
        return {
            "trigger_frame": trigger_frame,
            "selected_ids": list(self.selected_ids),
            "duration": self.duration,
            "certain_fraction_before": self.certain_before,
            "certain_fraction_after": self.certain_after,
            "ok": self.ok,
            "error": self.error,
        }


def rebuild(pool: MemoryPool, sampling: SamplingResult, old: HybridModel, references: Sequence[Frame] = (),
            augmentation: Sequence[Frame] = (), resolution: int = DEFAULT_RESOLUTION,
            truncation: float = DEFAULT_TRUNCATION, padding: float = DEFAULT_PADDING) -> RebuildResult:
    """Fuse the selected pool frames (plus references and active augmented views).

    Real frames label vertices certain; augmented frames only shape geometry.
    On failure the old model is returned with ``ok=False``.
    """
    if not sampling.selected:
        raise ValueError("nothing selected for the rebuild")
    t0 = time.perf_counter()
    chosen = [pool.entries[i] for i in sampling.selected]
    real = list(references) + [e.frame for e in chosen]
    ids = [e.frame_id for e in chosen]
    before = old.certain_fraction()
    try:
        new = build_model(real, resolution, truncation, padding, extra_frames=augmentation,
                          provenance=Provenance.REBUILT, build_stamp=old.build_stamp + 1)
    except (ReconstructionError, ValueError) as exc:
        return RebuildResult(old, False, ids, time.perf_counter() - t0, before, before, str(exc))
    return RebuildResult(new, True, ids, time.perf_counter() - t0, before, new.certain_fraction())
