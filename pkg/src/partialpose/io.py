"""On-disk formats: RGBD sequence directories, pool checkpoints and debug dumps.

A sequence directory holds ``NNNNNN.color.png``, ``NNNNNN.depth.png``
(16-bit millimetres), ``NNNNNN.mask.png`` and an ``intrinsics.json``.
Reference directories add ``NNNNNN.pose.json`` per frame.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .frame import Frame
from .geom import Intrinsics, Pose, parse_pose
from .raster import RenderOutput

DEPTH_SCALE = 1000.0  # stored units per meter
_FRAME_RE = re.compile(r"^(\d+)\.color\.png$")


class IngestionError(ValueError):
    """A required input file is missing or unreadable."""

    def __init__(self, path, reason: str):
        self.path = Path(path)
        super().__init__(f"{self.path}: {reason}")


# --- images ------------------------------------------------------------------------------

def _open(path) -> Image.Image:
    path = Path(path)
    if not path.exists():
        raise IngestionError(path, "file not found")
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise IngestionError(path, f"cannot decode image ({exc})") from exc
    return img


def read_color(path) -> np.ndarray:
    return np.asarray(_open(path).convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    img = np.asarray(_open(path))
    if img.ndim == 3:
        img = img[..., 0]
    return img > 0


def read_depth(path) -> np.ndarray:
    """16-bit PNG in millimetres to meters; zero stays invalid."""
    img = np.asarray(_open(path))
    if img.ndim != 2:
        raise IngestionError(path, "depth image must be single channel")
    return img.astype(np.float64) / DEPTH_SCALE


def write_color(path, color: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8)).save(path)


def write_depth(path, depth: np.ndarray) -> None:
    mm = np.clip(np.round(np.asarray(depth) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


# --- intrinsics and poses ------------------------------------------------------------

def read_intrinsics(path) -> Intrinsics:
    path = Path(path)
    if not path.exists():
        raise IngestionError(path, "file not found")
    try:
        return Intrinsics.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IngestionError(path, f"invalid intrinsics ({exc})") from exc


def write_intrinsics(path, k: Intrinsics) -> None:
    Path(path).write_text(json.dumps(k.to_dict(), indent=2))


def read_pose_file(path) -> Pose:
    path = Path(path)
    if not path.exists():
        raise IngestionError(path, "file not found")
    try:
        return parse_pose(path.read_text())
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise IngestionError(path, f"invalid pose ({exc})") from exc


def read_trajectory(path) -> list[Pose]:
    """One pose per line, as JSON or 16 numbers; JSON-lines records with a ``pose`` key also work."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(path, "file not found")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            out.append(parse_pose(line))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise IngestionError(path, f"line {n}: invalid pose ({exc})") from exc
    return out


def write_trajectory(path, poses: Iterable[Pose]) -> None:
    Path(path).write_text("".join(json.dumps(p.to_list()) + "\n" for p in poses))


def write_jsonl(path, records: Iterable[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))


# --- sequences ---------------------------------------------------------------------------

def frame_stems(directory) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(directory, "not a directory")
    stems = sorted(m.group(1) for p in directory.iterdir() if (m := _FRAME_RE.match(p.name)))
    if not stems:
        raise IngestionError(directory, "no NNNNNN.color.png frames found")
    return stems


def read_frame(directory, stem: str, k: Intrinsics, with_pose: bool = False) -> Frame:
    directory = Path(directory)
    color = read_color(directory / f"{stem}.color.png")
    depth = read_depth(directory / f"{stem}.depth.png")
    mask = read_mask(directory / f"{stem}.mask.png")
    pose = read_pose_file(directory / f"{stem}.pose.json") if with_pose else None
    if depth.shape != k.shape:
        raise IngestionError(directory / f"{stem}.depth.png",
                             f"size {depth.shape[::-1]} does not match intrinsics {k.width}x{k.height}")
    if mask.shape != depth.shape or color.shape[:2] != depth.shape:
        raise IngestionError(directory / f"{stem}.mask.png", "color, depth and mask sizes differ")
    return Frame(color, depth, mask, k, pose, int(stem))


def read_sequence(directory, with_poses: bool = False) -> list[Frame]:
    """Load every frame of a sequence directory in lexicographic order."""
    directory = Path(directory)
    k = read_intrinsics(directory / "intrinsics.json")
    return [read_frame(directory, s, k, with_poses) for s in frame_stems(directory)]


def write_sequence(directory, frames: Sequence[Frame], with_poses: bool = False) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if frames:
        write_intrinsics(directory / "intrinsics.json", frames[0].k)
    for i, f in enumerate(frames):
        stem = f"{i:06d}"
        write_color(directory / f"{stem}.color.png", f.color)
        write_depth(directory / f"{stem}.depth.png", f.depth)
        write_mask(directory / f"{stem}.mask.png", f.mask)
        if with_poses and f.pose is not None:
            (directory / f"{stem}.pose.json").write_text(json.dumps({"pose": f.pose.to_list()}))


# --- pool checkpoints and augmentation frames ----------------------------------------

def write_frame_dir(directory, frame: Frame, **meta) -> None:
    """Per-frame folder with color/depth/mask PNGs and a ``pose.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_color(directory / "color.png", frame.color)
    write_depth(directory / "depth.png", frame.depth)
    write_mask(directory / "mask.png", frame.mask)
    payload = {"frame_id": frame.frame_id, "pose": frame.pose.to_list() if frame.pose else None,
               "augmented": bool(frame.augmented), "intrinsics": frame.k.to_dict(), **meta}
    (directory / "pose.json").write_text(json.dumps(payload, indent=2))


def read_frame_dir(directory) -> tuple[Frame, dict]:
    directory = Path(directory)
    meta_path = directory / "pose.json"
    if not meta_path.exists():
        raise IngestionError(meta_path, "file not found")
    meta = json.loads(meta_path.read_text())
    k = Intrinsics.from_dict(meta["intrinsics"])
    pose = Pose.from_matrix(meta["pose"]) if meta.get("pose") is not None else None
    frame = Frame(read_color(directory / "color.png"), read_depth(directory / "depth.png"),
                  read_mask(directory / "mask.png"), k, pose, meta.get("frame_id", 0),
                  bool(meta.get("augmented", False)))
    return frame, meta


def save_pool(directory, pool) -> None:
    """Checkpoint a memory pool, one subfolder per entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(pool.entries):
        write_frame_dir(directory / f"{i:03d}", e.frame, seen_iou=e.seen_iou)
    (directory / "pool.json").write_text(json.dumps({"capacity": pool.capacity, "version": pool.version,
                                                     "size": len(pool.entries)}))


def load_pool(directory):
    from .completion import MemoryPool, PoolEntry

    directory = Path(directory)
    info_path = directory / "pool.json"
    if not info_path.exists():
        raise IngestionError(info_path, "file not found")
    info = json.loads(info_path.read_text())
    entries = []
    for i in range(info["size"]):
        frame, meta = read_frame_dir(directory / f"{i:03d}")
        entries.append(PoolEntry(frame.frame_id, frame, float(meta.get("seen_iou", 0.0))))
    return MemoryPool(info["capacity"], entries, info["version"])


def save_frames(directory, frames: Sequence[Frame]) -> None:
    """Augmentation frames in the pool's per-frame format."""
    for i, f in enumerate(frames):
        write_frame_dir(Path(directory) / f"{i:03d}", f)


def dump_render(directory, render: RenderOutput, prefix: str = "render") -> list[Path]:
    """Write a rendering as four PNGs: color, 16-bit depth, mask and uncertainty."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / f"{prefix}.{name}.png" for name in ("color", "depth", "mask", "uncertainty")]
    write_color(paths[0], render.color)
    write_depth(paths[1], render.depth)
    write_mask(paths[2], render.mask)
    write_mask(paths[3], render.uncertainty)
    return paths


def import_masks(source_dir, sequence_dir, pattern: str = "*.png", threshold: int = 0) -> list[Path]:
    """Copy masks from an external segmenter into a sequence directory.

    Files matching ``pattern`` in ``source_dir`` are taken in sorted order and
    paired with the sequence frames in order; pixels above ``threshold`` count
    as object. Any tool that writes one grayscale or RGB mask image per frame
    can be plugged in this way.
    """
    source_dir = Path(source_dir)
    stems = frame_stems(sequence_dir)
    sources = sorted(source_dir.glob(pattern))
    if len(sources) != len(stems):
        raise IngestionError(source_dir, f"{len(sources)} masks for {len(stems)} frames")
    out = []
    for stem, src in zip(stems, sources):
        img = np.asarray(_open(src))
        if img.ndim == 3:
            img = img[..., 0]
        dst = Path(sequence_dir) / f"{stem}.mask.png"
        write_mask(dst, img > threshold)
        out.append(dst)
    return out
