"""RGBD observation container shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Intrinsics, Pose


class DegenerateObservationError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    color: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    mask: np.ndarray  # (H, W) bool object mask
    k: Intrinsics
    pose: Pose | None = None  # object -> camera, known for references only
    frame_id: int | str = 0
    augmented: bool = False

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        color = np.asarray(self.color, dtype=np.float64)
        if depth.shape != self.k.shape:
            raise ValueError(f"depth {depth.shape} does not match intrinsics {self.k.shape}")
        if mask.shape != depth.shape or color.shape != depth.shape + (3,):
            raise ValueError("color, depth and mask resolutions differ")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "color", color)

    def with_pose(self, pose: Pose | None) -> "Frame":
        return Frame(self.color, self.depth, self.mask, self.k, pose, self.frame_id, self.augmented)

    @property
    def valid(self) -> np.ndarray:
        return self.mask & (self.depth > 0)
