"""Command-line entry point: ``partialpose run|evaluate|synth|inspect-model``.

Exit codes: 0 success, 2 input could not be ingested, 3 invalid
configuration, 4 reconstruction failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import AlignmentError, evaluate_poses, orbit_pose, reference_frames, render_sequence, scene_from_spec, sphere_poses
from .config import ConfigError, PipelineConfig
from .frame import DegenerateObservationError
from .genmodel import GeneratedModelInput
from .geom import Pose
from .mesh import MeshIngestError, load_mesh, write_ply
from .model import NoReferenceError, ReconstructionError, load_model, save_model
from .pipeline import Ablation, PipelineInputError, PipelineResult, evaluate, run_pipeline
from .volume import EmptyMeshError

log = logging.getLogger("partialpose")

EXIT_OK = 0
EXIT_INGEST = 2
EXIT_CONFIG = 3
EXIT_RECONSTRUCTION = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partialpose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="estimate poses over a test sequence")
    run.add_argument("sequence", type=Path, help="directory of NNNNNN.{color,depth,mask}.png + intrinsics.json")
    run.add_argument("output", type=Path)
    run.add_argument("--config", type=Path, help="YAML file with PipelineConfig keys")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--references", type=Path, help="directory of posed reference frames")
    src.add_argument("--generated-mesh", type=Path, help="OBJ/PLY mesh from an image-to-3D generator")
    src.add_argument("--first-frame-init", action="store_true", help="build the initial model from test frame 0")
    run.add_argument("--reference-image", type=Path)
    run.add_argument("--reference-mask", type=Path)
    run.add_argument("--reference-pose", type=Path, help="assumed object-to-camera pose of the reference image")
    run.add_argument("--no-completion", action="store_true", help="never rebuild the model")
    run.add_argument("--always-complete", action="store_true", help="rebuild on every pool admission")
    run.add_argument("--no-filter", action="store_true", help="admit pool frames regardless of seen IoU")
    run.add_argument("--geodesic-sampling", action="store_true", help="farthest-rotation frame sampling")
    run.add_argument("--gt-poses", type=Path, help="ground-truth trajectory; evaluates the run when given")
    run.add_argument("--gt-mesh", type=Path)
    run.add_argument("--save-pool", action="store_true", help="checkpoint the memory pool")
    run.add_argument("--debug-renders", action="store_true", help="dump the final-model rendering of each frame")
    run.add_argument("--plots", action="store_true", help="render report figures")

    ev = sub.add_parser("evaluate", help="metrics of a trajectory against ground truth")
    ev.add_argument("trajectory", type=Path, help="run output directory or a pose file")
    ev.add_argument("--gt-poses", type=Path, required=True)
    ev.add_argument("--gt-mesh", type=Path, required=True)
    ev.add_argument("--model", type=Path, help="reconstructed model for the Chamfer distance")
    ev.add_argument("--one-directional", action="store_true", help="Chamfer from the reconstruction only")
    ev.add_argument("--max-threshold", type=float, default=0.1, help="AUC threshold in meters")
    ev.add_argument("--out", type=Path, help="directory for report.json / report.csv / figures")
    ev.add_argument("--plots", action="store_true")

    syn = sub.add_parser("synth", help="render a synthetic scene to a sequence directory")
    syn.add_argument("scene", type=Path, help="scene JSON")
    syn.add_argument("output", type=Path)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--ref-view", nargs=2, type=float, action="append", metavar=("AZ_DEG", "EL_DEG"),
                     help="add a reference view on the orbit (repeatable)")
    syn.add_argument("--ref-sphere", type=int, help="add N reference views spread over a sphere")
    syn.add_argument("--ref-distance", type=float, default=0.6)

    ins = sub.add_parser("inspect-model", help="print model statistics and optionally re-export it")
    ins.add_argument("model", type=Path)
    ins.add_argument("--out", type=Path, help="write the mesh (with uncertainty) to this PLY")
    ins.add_argument("--render-pose", type=Path, help="pose file; dumps a debug rendering")
    ins.add_argument("--intrinsics", type=Path)
    ins.add_argument("--debug-dir", type=Path, default=Path("."))
    return parser


def _ablation(args) -> Ablation:
    return Ablation(args.no_completion, args.always_complete, args.no_filter, args.geodesic_sampling)


def _generated_input(args, k) -> GeneratedModelInput:
    if args.reference_mask is None:
        raise PipelineInputError("--generated-mesh needs --reference-mask")
    mesh = load_mesh(args.generated_mesh)
    mask = io.read_mask(args.reference_mask)
    image = io.read_color(args.reference_image) if args.reference_image else None
    if args.reference_pose:
        pose = io.read_pose_file(args.reference_pose)
    else:
        # canonical front view: camera on the object's +z side, far enough to see all of it
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 2.5 * mesh.diameter()]) - mesh.center)
    return GeneratedModelInput(mesh, image, mask, pose, k)


def _write_run(out: Path, result: PipelineResult, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    io.write_jsonl(out / "trajectory.jsonl", (r.to_json() for r in result.records))
    io.write_trajectory(out / "poses.txt", result.poses)
    io.write_jsonl(out / "rebuild_log.jsonl", result.rebuild_log)
    save_model(out / "model.ply", result.model)
    save_model(out / "initial_model.ply", result.initial_model)
    summary = {
        "frames": len(result.records),
        "n_rebuild": result.n_rebuild,
        "n_admitted": result.n_admitted,
        "pool_ids": result.pool_ids,
        "ablation": _ablation(args).name,
        "certain_fraction_initial": result.initial_model.certain_fraction(),
        "certain_fraction_final": result.model.certain_fraction(),
        "canonical_pose": result.canonical_pose.to_list() if result.canonical_pose else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


def cmd_run(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    frames = io.read_sequence(args.sequence)
    refs = generated = None
    if args.references:
        refs = io.read_sequence(args.references, with_poses=True)
    elif args.generated_mesh:
        generated = _generated_input(args, frames[0].k)

    def progress(rec):
        log.info("frame %s %s seen_iou=%.3f rate=%.3f valid=%s stamp=%d", rec.frame_id, rec.mode, rec.seen_iou,
                 rec.uncertainty_rate, rec.valid, rec.build_stamp)

    result = run_pipeline(cfg, frames, refs, generated, args.first_frame_init, _ablation(args), progress)
    _write_run(args.output, result, args)
    if args.save_pool and result.pool is not None:
        io.save_pool(args.output / "pool", result.pool)
    if result.augmentation is not None:
        io.save_frames(args.output / "augmentation", result.augmentation.frames)
    if args.debug_renders:
        for f, rec in zip(frames, result.records):
            stem = f"{rec.frame_id:06d}" if isinstance(rec.frame_id, int) else str(rec.frame_id)
            io.dump_render(args.output / "renders", result.model.render(rec.pose, f.k), stem)
    if args.plots:
        from .plotting import plot_confidence, plot_rebuilds

        plot_confidence(result.records, args.output / "confidence.png", cfg.thresholds.t_complete, cfg.thresholds.t_u)
        plot_rebuilds(result.rebuild_log, args.output / "rebuilds.png")
    if args.gt_poses:
        if args.gt_mesh is None:
            raise PipelineInputError("--gt-poses needs --gt-mesh")
        report = evaluate(result, io.read_trajectory(args.gt_poses), load_mesh(args.gt_mesh))
        _write_report(report, args.output, args.plots)
    print(json.dumps({"frames": len(result.records), "n_rebuild": result.n_rebuild,
                      "output": str(args.output)}))
    return EXIT_OK


def _write_report(report, out: Path, plots: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    if plots:
        from .plotting import plot_errors

        plot_errors(report, out / "errors.png")
    print(json.dumps(report.to_dict()))


def cmd_evaluate(args) -> int:
    src = args.trajectory
    model_path = args.model
    canonical = None
    if src.is_dir():
        summary_path = src / "summary.json"
        if summary_path.exists():
            cp = json.loads(summary_path.read_text()).get("canonical_pose")
            canonical = Pose.from_matrix(cp) if cp else None
        if model_path is None and (src / "model.ply").exists():
            model_path = src / "model.ply"
        src = src / "trajectory.jsonl"
    est = io.read_trajectory(src)
    gts = io.read_trajectory(args.gt_poses)
    gt_mesh = load_mesh(args.gt_mesh)
    model_mesh = load_model(model_path).mesh if model_path else None
    if canonical is not None and gts:
        align = canonical.inverse() @ gts[0]
        est = [p @ align for p in est]
        if model_mesh is not None:
            model_mesh = model_mesh.transformed(align.inverse())
    report = evaluate_poses(est, gts, gt_mesh, None, max_threshold=args.max_threshold)
    if model_mesh is not None:
        from .bench import chamfer

        report.chamfer = chamfer(model_mesh, gt_mesh, one_directional=args.one_directional)
    if args.out:
        _write_report(report, args.out, args.plots)
    else:
        print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_synth(args) -> int:
    path = args.scene
    if not path.exists():
        raise io.IngestionError(path, "file not found")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise io.IngestionError(path, f"invalid JSON ({exc})") from exc
    scene = scene_from_spec(spec, path.parent)
    frames, gts = render_sequence(scene, args.seed)
    out = args.output
    io.write_sequence(out / "sequence", frames)
    io.write_trajectory(out / "gt_poses.txt", gts)
    write_ply(out / "gt_mesh.ply", scene.gt_mesh)
    poses = [orbit_pose(np.deg2rad(az), np.deg2rad(el), args.ref_distance) for az, el in (args.ref_view or [])]
    if args.ref_sphere:
        poses += sphere_poses(args.ref_sphere, args.ref_distance)
    if poses:
        refs = reference_frames(scene.gt_mesh, poses, scene.k, scene.noise, args.seed + 1)
        io.write_sequence(out / "references", refs, with_poses=True)
    print(json.dumps({"frames": len(frames), "references": len(poses), "output": str(out)}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    info = {
        "vertices": int(len(model.mesh.vertices)),
        "faces": int(len(model.mesh.faces)),
        "certain_fraction": model.certain_fraction(),
        "certain_vertices": int(model.n_certain),
        "provenance": model.provenance.value,
        "build_stamp": model.build_stamp,
        "diameter_m": model.mesh.diameter(),
    }
    if args.out:
        save_model(args.out, model)
    if args.render_pose:
        if args.intrinsics is None:
            raise PipelineInputError("--render-pose needs --intrinsics")
        k = io.read_intrinsics(args.intrinsics)
        r = model.render(io.read_pose_file(args.render_pose), k)
        info["debug_renders"] = [str(p) for p in io.dump_render(args.debug_dir, r, args.model.stem)]
    print(json.dumps(info, indent=2))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "evaluate": cmd_evaluate, "synth": cmd_synth, "inspect-model": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReconstructionError, EmptyMeshError) as exc:
        print(f"error: reconstruction failed: {exc}", file=sys.stderr)
        return EXIT_RECONSTRUCTION
    except (io.IngestionError, MeshIngestError, PipelineInputError, NoReferenceError, AlignmentError,
            DegenerateObservationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INGEST


if __name__ == "__main__":
    sys.exit(main())
