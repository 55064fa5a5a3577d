import numpy as np
import pytest

from partialpose.bench import orbit_pose, render_frame
from partialpose.frame import DegenerateObservationError, Frame
from partialpose.geom import Pose, geodesic_distance, min_pairwise_geodesic, rot_x, rot_y
from partialpose.genmodel import (
    AugmentationSet,
    GeneratedModelInput,
    RescaleConfig,
    certain_overlap,
    coarse_scale,
    filter_augmentation,
    fine_scale,
    fit_reference_pose,
    init_generated_model,
    is_degenerate,
    render_augmentation,
    rescale_rotations,
    should_switch,
)
from partialpose.mesh import MeshIngestError, TriangleMesh, sphere_mesh, textured_box
from partialpose.model import HybridModel, Provenance
from partialpose.pose import Thresholds
from partialpose.raster import ray_visibility_oracle

TH = Thresholds()
QUICK = RescaleConfig(n_view=1, n_inplane=4, iterations=2, refine_iters=3, refine_top_k=2)


def project_points_rounded(cam, k):
    u = np.round(k.fx * cam[:, 0] / cam[:, 2] + k.cx).astype(int)
    v = np.round(k.fy * cam[:, 1] / cam[:, 2] + k.cy).astype(int)
    return u, v, cam[:, 2]


def gen_input(mesh, pose, k, mask=None):
    if mask is None:
        mask = render_frame(mesh, pose, k).mask
    return GeneratedModelInput(mesh, None, mask, pose, k)


@pytest.fixture(scope="module")
def scene(small_k):
    box = textured_box(cell=0.01)
    pose = orbit_pose(0.3, 0.4, 0.6)
    return box, pose, render_frame(box, pose, small_k)


@pytest.fixture(scope="module")
def aug_model():
    s = sphere_mesh(0.05, level=3)
    return HybridModel(s, np.ones(len(s.vertices), bool), Provenance.FROM_GENERATED)


class TestInitGeneratedModel:
    def test_sphere_front_hemisphere(self, k):
        s = sphere_mesh(0.05, level=2)
        pose = Pose(np.eye(3), [0, 0, 0.5])
        inp = gen_input(s, pose, k)
        model = init_generated_model(inp, fit_pose=False)
        u, v, _ = project_points_rounded(pose.apply(s.vertices), k)
        oracle = ray_visibility_oracle(s, pose, k) & inp.reference_mask[v, u]
        assert np.mean(model.uncertain == ~oracle) >= 0.99
        assert model.provenance == Provenance.FROM_GENERATED

    def test_enclosing_mask_equals_visibility(self, k):
        s = sphere_mesh(0.05, level=2)
        pose = Pose(np.eye(3), [0, 0, 0.5])
        model = init_generated_model(gen_input(s, pose, k, np.ones(k.shape, bool)), fit_pose=False)
        from partialpose.raster import vertex_visibility

        np.testing.assert_array_equal(~model.uncertain, vertex_visibility(s, pose, k))

    def test_empty_mask_degenerate(self, k):
        s = sphere_mesh(0.05, level=2)
        model = init_generated_model(gen_input(s, Pose(np.eye(3), [0, 0, 0.5]), k, np.zeros(k.shape, bool)))
        assert model.uncertain.all() and is_degenerate(model)

    def test_empty_mesh(self, k):
        with pytest.raises(MeshIngestError):
            GeneratedModelInput(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), None,
                                np.ones(k.shape, bool), Pose(), k)

    def test_fit_pose_matches_mask_scale(self, k):
        s = sphere_mesh(0.05, level=2)
        true = Pose(np.eye(3), [0.02, -0.01, 0.5])
        mask = render_frame(s, true, k).mask
        big = s.scaled(3.0)  # unknown metric scale: the mesh is 3x too large
        fitted = fit_reference_pose(big, Pose(np.eye(3), [0, 0, 0.5]), mask, k)
        sil = render_frame(big, fitted, k).mask
        iou = (sil & mask).sum() / (sil | mask).sum()
        assert iou > 0.95
        np.testing.assert_array_equal(fitted.rotation, np.eye(3))

    def test_fit_pose_scale_invariant_labels(self, k, box):
        pose = orbit_pose(0.3, 0.4, 0.6)
        mask = render_frame(box, pose, k).mask
        a = init_generated_model(gen_input(box, pose, k, mask))
        b = init_generated_model(gen_input(box.scaled(1.3), pose, k, mask))
        assert abs(a.certain_fraction() - b.certain_fraction()) < 0.02


class TestCoarseScale:
    def test_ratio(self, small_k):
        depth = np.zeros(small_k.shape)
        mask = np.zeros(small_k.shape, bool)
        # two pixels 0.2 m apart at depth 1 m: columns differ by 0.2 * fx
        depth[60, 50] = depth[60, 80] = 1.0
        mask[60, 50] = mask[60, 80] = True
        frame = Frame(np.zeros(small_k.shape + (3,)), depth, mask, small_k)
        unit = TriangleMesh([[0, 0, 0], [1.0, 0, 0], [0, 0.1, 0]], [[0, 1, 2]])
        scaled, length = coarse_scale(unit, frame)
        assert length == pytest.approx(0.2)
        assert scaled.diameter() == pytest.approx(0.2)

    def test_box_front_face(self, k):
        box = textured_box()
        pose = orbit_pose(0.0, 0.0, 0.6)
        frame = render_frame(box, pose, k)
        _, length = coarse_scale(box, frame)
        # visible face: the two box extents orthogonal to the viewing axis
        extents = np.array([0.2, 0.14, 0.1])
        axis = int(np.argmax(np.abs(pose.rotation[2])))
        diag = np.hypot(*np.delete(extents, axis))
        assert length == pytest.approx(diag, rel=0.05)

    def test_single_pixel(self, small_k):
        depth = np.zeros(small_k.shape)
        mask = np.zeros(small_k.shape, bool)
        depth[5, 5], mask[5, 5] = 1.0, True
        with pytest.raises(DegenerateObservationError):
            coarse_scale(sphere_mesh(), Frame(np.zeros(small_k.shape + (3,)), depth, mask, small_k))


class TestFineScale:
    def test_grid(self):
        cfg = RescaleConfig()
        assert len(cfg.scale_factors) == 11
        np.testing.assert_allclose(np.diff(cfg.scale_factors), 0.04)
        assert len(rescale_rotations(np.eye(3), cfg)) == 5 * 24

    def test_bad_config(self):
        with pytest.raises(ValueError):
            RescaleConfig(scale_factors=(1.0, 0.9))
        with pytest.raises(ValueError):
            RescaleConfig(scale_factors=(-1.0, 1.0))

    def _model(self, mesh, pose, k):
        return HybridModel(mesh, np.zeros(len(mesh.vertices), bool), Provenance.FROM_GENERATED, 0, (pose,))

    def test_recovers_shrunk_mesh(self, scene, small_k):
        box, pose, frame = scene
        res = fine_scale(self._model(box.scaled(0.9), pose, small_k), frame, QUICK)
        assert res.scale * 0.9 == pytest.approx(1.0, abs=0.05)
        assert res.valid

    def test_correct_scale_fixed_point_and_unimodal(self, scene, small_k):
        box, pose, frame = scene
        res = fine_scale(self._model(box, pose, small_k), frame, QUICK)
        assert res.scale == pytest.approx(1.0, abs=0.04)
        grid = res.history[0]
        i = int(np.argmax([s for _, s in grid]))
        for j in (i - 1, i + 1):
            if 0 <= j < len(grid):
                assert grid[i][1] >= grid[j][1]

    def test_rotation_invariant(self, scene, small_k):
        box, pose, frame = scene
        r = rot_x(0.7) @ rot_y(-0.4)
        turned = box.transformed(Pose(r, np.zeros(3)))
        pose2 = Pose(pose.rotation @ r.T, pose.translation)
        a = fine_scale(self._model(box.scaled(0.9), pose, small_k), frame, QUICK)
        b = fine_scale(self._model(turned.scaled(0.9), pose2, small_k), frame, QUICK)
        assert abs(a.scale - b.scale) <= 0.04


class TestAugmentation:
    def test_render(self, aug_model, k):
        aug = render_augmentation(aug_model, k, 24)
        assert len(aug.frames) == 24 and aug.active.all()
        assert all(f.mask.any() and f.augmented for f in aug.frames)
        assert min_pairwise_geodesic([f.pose.rotation for f in aug.frames]) > 0.2
        for f in aug.frames:
            d = np.linalg.norm(f.pose.inverse().translation - aug_model.mesh.center)
            assert d == pytest.approx(2.5 * aug_model.mesh.diameter())

    def test_filter_extremes(self, aug_model, k):
        aug = render_augmentation(aug_model, k, 24)
        filter_augmentation(aug, aug_model)
        assert aug.active.all()
        filter_augmentation(aug, aug_model.with_labels(np.zeros(len(aug_model.uncertain), bool)))
        assert not aug.active.any()

    def test_filter_hemisphere(self, aug_model, k):
        v = aug_model.mesh.vertices
        half = aug_model.with_labels(v[:, 2] < 0)  # +z hemisphere certain
        aug = render_augmentation(aug_model, k, 24)
        filter_augmentation(aug, half)
        for f, active in zip(aug.frames, aug.active):
            eye = f.pose.inverse().translation
            if eye[2] > 0.5 * np.linalg.norm(eye):
                assert not active
            if eye[2] < -0.5 * np.linalg.norm(eye):
                assert active

    def test_filter_monotone(self, aug_model, k, rng):
        aug = render_augmentation(aug_model, k, 24)
        v = aug_model.mesh.vertices
        prev_off = 0
        for level in (0.04, 0.02, 0.0, -0.03):
            before = aug.active.copy()
            filter_augmentation(aug, aug_model.with_labels(v[:, 2] < level))
            assert not np.any(aug.active & ~before)
            assert (~aug.active).sum() >= prev_off
            prev_off = (~aug.active).sum()

    def test_overlap_range(self, aug_model, k):
        aug = render_augmentation(aug_model, k, 4)
        assert all(0.0 <= certain_overlap(f, aug_model) <= 1.0 for f in aug.frames)
        assert isinstance(aug, AugmentationSet)


class TestShouldSwitch:
    @pytest.mark.parametrize("deg, expected", [(0.0, False), (44.0, False), (46.0, True)])
    def test_threshold(self, deg, expected):
        a = Pose(np.eye(3), [0, 0, 0.6])
        b = Pose(rot_y(np.deg2rad(deg)), [0, 0, 0.6])
        assert should_switch(a, b, TH) is expected
        assert geodesic_distance(a.rotation, b.rotation) == pytest.approx(np.deg2rad(deg))
