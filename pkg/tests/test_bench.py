import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partialpose.bench import (
    AlignmentError,
    Occluder,
    SyntheticScene,
    add_metric,
    adds_metric,
    auc,
    chamfer,
    chamfer_points,
    evaluate_poses,
    orbit_pose,
    render_frame,
    render_sequence,
    scene_from_spec,
    turntable,
)
from partialpose.geom import Intrinsics, Pose, geodesic_distance, random_rotation, rot_z
from partialpose.mesh import TriangleMesh, cylinder_mesh, sphere_mesh, textured_box


def random_pose(rng):
    return Pose(random_rotation(rng), rng.normal(0, 0.2, 3))


def naive_add(gt, est, pts):
    total = 0.0
    for p in pts:
        a = gt.rotation @ p + gt.translation
        b = est.rotation @ p + est.translation
        total += float(np.sqrt(np.sum((a - b) ** 2)))
    return total / len(pts)


def naive_adds(gt, est, pts):
    a = pts @ gt.rotation.T + gt.translation
    b = pts @ est.rotation.T + est.translation
    total = 0.0
    for p in a:
        total += min(float(np.sqrt(np.sum((p - q) ** 2))) for q in b)
    return total / len(a)


def naive_auc(errors, max_t):
    """Integrate the accuracy step curve interval by interval."""
    e = sorted(x for x in errors if x < max_t)
    n = len(errors)
    area, prev = 0.0, 0.0
    for i, x in enumerate(e):
        area += (x - prev) * i / n
        prev = x
    area += (max_t - prev) * len(e) / n
    return 100.0 * area / max_t


def naive_chamfer(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


class TestMetricOracles:
    def test_add_adds(self, rng):
        for _ in range(20):
            pts = rng.normal(0, 0.05, (int(rng.integers(1, 200)), 3))
            gt, est = random_pose(rng), random_pose(rng)
            assert add_metric(gt, est, pts) == pytest.approx(naive_add(gt, est, pts), abs=1e-9)
            assert adds_metric(gt, est, pts) == pytest.approx(naive_adds(gt, est, pts), abs=1e-9)

    def test_auc(self, rng):
        for _ in range(100):
            e = rng.uniform(0, 0.15, int(rng.integers(1, 200)))
            assert auc(e) == pytest.approx(naive_auc(list(e), 0.1), abs=1e-9)

    def test_chamfer(self, rng):
        for _ in range(20):
            a = rng.normal(0, 0.05, (int(rng.integers(1, 200)), 3))
            b = rng.normal(0, 0.05, (int(rng.integers(1, 200)), 3))
            assert chamfer_points(a, b) == pytest.approx(naive_chamfer(a, b), abs=1e-9)


class TestExamples:
    def test_add_examples(self, rng):
        pts = rng.normal(0, 0.05, (100, 3))
        gt = random_pose(rng)
        assert add_metric(gt, gt, pts) == 0.0
        assert adds_metric(gt, gt, pts) == 0.0
        shifted = Pose(gt.rotation, gt.translation + [0.005, 0, 0])
        assert add_metric(gt, shifted, pts) == pytest.approx(0.005)

    def test_empty_points(self):
        with pytest.raises(ValueError):
            add_metric(Pose(), Pose(), np.zeros((0, 3)))

    def test_cylinder_symmetry(self):
        # 50 x 10 side vertices; a turn by whole segments maps the set onto itself
        cyl = cylinder_mesh(0.04, 0.12, segments=50, rings=9)
        pts = cyl.vertices[np.abs(np.hypot(cyl.vertices[:, 0], cyl.vertices[:, 1]) - 0.04) < 1e-9]
        assert len(pts) == 500
        gt = Pose(np.eye(3), [0, 0, 0.6])
        est = Pose(rot_z(2 * np.pi * 7 / 50), [0, 0, 0.6])
        assert adds_metric(gt, est, pts) < 1e-3
        assert add_metric(gt, est, pts) > 0.01

    def test_auc_examples(self, rng):
        assert auc([0.0] * 10) == 100.0
        assert auc([0.2] * 10) == 0.0
        assert auc([0.005] * 50) == pytest.approx(95.0, abs=0.5)
        assert auc(rng.uniform(0, 0.1, 1000)) == pytest.approx(50.0, abs=2.0)
        assert auc([np.nan, 0.0]) == 50.0
        with pytest.raises(ValueError):
            auc([])

    def test_chamfer_examples(self):
        a = sphere_mesh(0.05, level=4)
        b = sphere_mesh(0.06, level=4)
        assert chamfer(a, a) < 0.05
        assert chamfer(a, b) == pytest.approx(1.0, abs=0.05)
        assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=0.02)
        assert chamfer(a, b, one_directional=True) == pytest.approx(1.0, abs=0.05)
        with pytest.raises(ValueError):
            chamfer(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), a)

    def test_chamfer_self_decreases(self, box):
        values = [100 * chamfer_points(box.sample_surface(n, 0), box.sample_surface(n, 1)) for n in (500, 2000, 8000)]
        assert values[0] > values[1] > values[2]


class TestMetricProperties:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_adds_le_add_and_left_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(0, 0.05, (50, 3))
        gt, est, common = random_pose(rng), random_pose(rng), random_pose(rng)
        add = add_metric(gt, est, pts)
        assert adds_metric(gt, est, pts) <= add + 1e-12
        assert add_metric(common @ gt, common @ est, pts) == pytest.approx(add, abs=1e-9)

    @given(st.lists(st.floats(0, 0.2), min_size=1, max_size=30), st.integers(0, 29), st.floats(0, 0.1))
    @settings(max_examples=100, deadline=None)
    def test_auc_monotone(self, errors, i, bump):
        worse = list(errors)
        worse[i % len(worse)] += bump
        assert auc(worse) <= auc(errors) + 1e-12
        assert 0.0 <= auc(errors) <= 100.0


class TestSynthetic:
    def test_plane_depth(self):
        k = Intrinsics(100.0, 100.0, 49.5, 49.5, 100, 100)
        quad = TriangleMesh([[-0.3, -0.3, 0], [0.3, -0.3, 0], [0.3, 0.3, 0], [-0.3, 0.3, 0]], [[0, 1, 2], [0, 2, 3]])
        f = render_frame(quad, Pose(np.eye(3), [0, 0, 0.8]), k)
        np.testing.assert_allclose(f.depth[f.mask], 0.8, atol=1e-12)

    def test_occluder_halves_mask(self, k):
        obj = textured_box((0.1, 0.1, 0.1), cell=0.01)
        pose = Pose(np.eye(3), [0, 0, 0.6])
        full = render_frame(obj, pose, k)
        # a plate in front of the box covering x < 0 (camera frame)
        plate = textured_box((0.2, 0.3, 0.01), cell=0.02)
        occ = Occluder(plate, Pose(np.eye(3), [-0.1, 0, 0.45]))
        half = render_frame(obj, pose, k, occluder=occ)
        assert half.mask.sum() / full.mask.sum() == pytest.approx(0.5, abs=0.02)

    def test_turntable_steps(self):
        traj = turntable(180, 2.0)
        steps = [geodesic_distance(a.rotation, b.rotation) for a, b in zip(traj, traj[1:])]
        np.testing.assert_allclose(np.rad2deg(steps), 2.0, atol=1e-6)

    def test_noise(self, box, k):
        scene = SyntheticScene(box, [orbit_pose(0, 0.3, 0.6)], k, 0.002)
        frames, gts = render_sequence(scene)
        clean = render_frame(box, gts[0], k)
        diff = frames[0].depth[clean.mask] - clean.depth[clean.mask]
        assert np.std(diff) == pytest.approx(0.002, rel=0.1)

    def test_scene_from_dict(self, tmp_path):
        scene = scene_from_spec({"trajectory": "turntable", "frames": 5, "step_deg": 3.0, "sigma": 0.001})
        assert len(scene.trajectory) == 5 and scene.noise == 0.001
        scripted = scene_from_spec({"trajectory": "scripted", "poses": [np.eye(4).tolist()]})
        assert len(scripted.trajectory) == 1
        with pytest.raises(ValueError):
            scene_from_spec({"trajectory": "spiral"})


class TestEvaluate:
    def test_report(self, box, tmp_path):
        gts = turntable(5, 10.0)
        est = [Pose(p.rotation, p.translation + [0.005, 0, 0]) for p in gts]
        rep = evaluate_poses(est, gts, box, model=box, chamfer_samples=2000)
        assert rep.add_auc == pytest.approx(95.0, abs=1e-6)
        assert rep.chamfer < 0.2
        rep.to_csv(tmp_path / "r.csv")
        rep.to_json(tmp_path / "r.json")
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 6
        assert json.loads((tmp_path / "r.json").read_text())["frames"] == 5

    def test_length_mismatch(self, box):
        with pytest.raises(AlignmentError):
            evaluate_poses([Pose()], [Pose(), Pose()], box)
