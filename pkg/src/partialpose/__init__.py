"""Uncertainty-aware 6D object pose estimation and online model completion from partial references."""

from .bench import MetricReport, SyntheticScene, add_metric, adds_metric, auc, chamfer, render_sequence
from .completion import MemoryPool, rebuild, sample_frames, try_admit
from .config import ConfigError, PipelineConfig
from .frame import Frame
from .geom import Intrinsics, Pose, geodesic_distance
from .mesh import TriangleMesh, load_mesh
from .model import HybridModel, Provenance, build_model, load_model, save_model, seen_iou, uncertainty_rate
from .pipeline import Ablation, PipelineResult, evaluate, run_pipeline
from .pose import ScoredPose, estimate_pose, refine_pose, score_pose, track_frame

__version__ = "0.1.0"

__all__ = [
    "Ablation", "ConfigError", "Frame", "HybridModel", "Intrinsics", "MemoryPool", "MetricReport",
    "PipelineConfig", "PipelineResult", "Pose", "Provenance", "ScoredPose", "SyntheticScene", "TriangleMesh",
    "add_metric", "adds_metric", "auc", "build_model", "chamfer", "estimate_pose", "evaluate",
    "geodesic_distance", "load_mesh", "load_model", "rebuild", "refine_pose", "render_sequence", "run_pipeline",
    "sample_frames", "save_model", "score_pose", "seen_iou", "track_frame", "try_admit", "uncertainty_rate",
]
