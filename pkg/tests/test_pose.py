import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angle_i2p.geometry import CorrespondenceSet, GeometryError, Pose, random_rotation, rotation_about
from angle_i2p.pose import (MetricsReport, aggregate, evaluate, label_inliers, p3p_grunert, _bearings,
                            reports_to_csv, rotation_error, solve_pnp_ransac, summary_text, translation_error)
from angle_i2p.reference import quaternion_angle_deg
from angle_i2p.synth import SceneConfig, generate_scene


class TestErrors:
    def test_identical(self):
        R = random_rotation(np.random.default_rng(0))
        assert rotation_error(R, R) == pytest.approx(0.0, abs=1e-12)
        assert translation_error([1, 2, 3], [1, 2, 3]) == 0.0

    def test_ten_degrees_about_z(self):
        R = random_rotation(np.random.default_rng(1))
        assert abs(rotation_error(R @ rotation_about([0, 0, 1], math.radians(10)), R) - 10.0) < 1e-9

    def test_near_half_turn(self):
        assert rotation_error(np.eye(3), rotation_about([1, 1, 0], math.pi)) == pytest.approx(180.0, abs=1e-9)

    @given(st.integers(0, 2**32 - 1))
    def test_quaternion_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_rotation(rng), random_rotation(rng)
        assert abs(rotation_error(a, b) - quaternion_angle_deg(a, b)) < 1e-9

    @given(st.integers(0, 2**32 - 1))
    def test_left_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a = Pose(random_rotation(rng), rng.normal(size=3))
        b = Pose(random_rotation(rng), rng.normal(size=3))
        T = Pose(random_rotation(rng), np.zeros(3))
        ta, tb = T.compose(a), T.compose(b)
        assert abs(rotation_error(ta.rotation, tb.rotation) - rotation_error(a.rotation, b.rotation)) < 1e-9
        assert abs(translation_error(ta.translation, tb.translation)
                   - translation_error(a.translation, b.translation)) < 1e-9


class TestLabels:
    def test_perfect_and_displaced(self):
        c = generate_scene(SceneConfig(n_points=30, seed=3)).corrs
        assert label_inliers(c).all()
        moved = c.points.copy()
        Xc = c.gt_pose.apply(moved[:1])
        # displace along the viewing ray so the pixel still projects correctly
        ray = Xc[0] / np.linalg.norm(Xc[0])
        moved[0] = c.gt_pose.inverse().apply((Xc[0] + 0.2 * ray)[None])[0]
        d = CorrespondenceSet(c.pixels, moved, c.est_depth, c.est_points, c.intrinsics, gt_pose=c.gt_pose,
                              gt_depth=c.gt_depth)
        lab = label_inliers(d, dist_threshold=0.05)
        assert not lab[0] and lab[1:].all()

    def test_generator_labels_agree(self, noisy_scene):
        np.testing.assert_array_equal(label_inliers(noisy_scene.corrs), noisy_scene.corrs.gt_labels)

    def test_missing_pose(self, noisy_scene):
        c = noisy_scene.corrs
        bare = CorrespondenceSet(c.pixels, c.points, c.est_depth, c.est_points, c.intrinsics)
        with pytest.raises(GeometryError):
            label_inliers(bare)


class TestRansac:
    @pytest.mark.parametrize("solver", ["sqpnp", "p3p", "dlt6"])
    def test_exact_recovery(self, solver):
        c = generate_scene(SceneConfig(n_points=20, seed=4)).corrs
        res = solve_pnp_ransac(c, iterations=1, seed=0, minimal_solver=solver)
        assert res.success and res.inliers.all()
        assert rotation_error(res.pose.rotation, c.gt_pose.rotation) < 1e-6
        assert translation_error(res.pose.translation, c.gt_pose.translation) < 1e-8

    def test_outliers_and_noise(self):
        ok = 0
        for seed in range(10):
            c = generate_scene(SceneConfig(n_points=100, outlier_ratio=0.6, pixel_noise_px=1.0, seed=seed)).corrs
            r = solve_pnp_ransac(c, iterations=1000, seed=seed)
            ok += (r.success and rotation_error(r.pose.rotation, c.gt_pose.rotation) < 1
                   and translation_error(r.pose.translation, c.gt_pose.translation) < 0.01)
        assert ok >= 9

    def test_deterministic(self, noisy_scene):
        a = solve_pnp_ransac(noisy_scene.corrs, iterations=1000, seed=5)
        b = solve_pnp_ransac(noisy_scene.corrs, iterations=1000, seed=5)
        np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
        np.testing.assert_array_equal(a.inliers, b.inliers)

    def test_too_few_points(self, clean_scene):
        assert not solve_pnp_ransac(clean_scene.corrs.subset(np.arange(5))).success

    def test_unknown_solver(self, clean_scene):
        with pytest.raises(ValueError):
            solve_pnp_ransac(clean_scene.corrs, minimal_solver="upnp")

    def test_p3p_contains_truth(self):
        c = generate_scene(SceneConfig(n_points=10, seed=6)).corrs
        R, t, valid = p3p_grunert(_bearings(c.pixels, c.intrinsics)[None, :3], c.points[None, :3])
        errs = [rotation_error(R[0, k], c.gt_pose.rotation) for k in range(R.shape[1]) if valid[0, k]]
        assert min(errs) < 1e-6


class TestEvaluate:
    def test_perfect_scene(self, clean_scene):
        r = evaluate(clean_scene.corrs, ransac_iterations=10)
        assert r.inlier_ratio == 1.0 and r.registration_recall == 1.0
        assert r.mean_rotation_error < 1e-6 and r.mean_translation_error < 1e-8

    def test_ir_direct_count(self):
        # three matches whose 3D discrepancy along the ray is 0.01, 0.2, 0.04 m
        c = generate_scene(SceneConfig(n_points=10, seed=7)).corrs.subset([0, 1, 2])
        Xc = c.gt_pose.apply(c.points)
        ray = Xc / np.linalg.norm(Xc, axis=1, keepdims=True)
        shifted = c.gt_pose.inverse().apply(Xc + np.array([0.01, 0.2, 0.04])[:, None] * ray)
        d = CorrespondenceSet(c.pixels, shifted, c.est_depth, c.est_points, c.intrinsics, gt_pose=c.gt_pose,
                              gt_depth=c.gt_depth)
        assert evaluate(d).inlier_ratio == pytest.approx(2 / 3)

    def test_failed_pnp_counts_as_miss(self, clean_scene):
        r = evaluate(clean_scene.corrs.subset(np.arange(4)))
        assert not r.pnp_success and r.registration_recall == 0.0

    def test_empty_set(self, clean_scene):
        r = evaluate(clean_scene.corrs.subset(np.zeros(len(clean_scene.corrs), dtype=bool)))
        assert r.inlier_ratio == 0.0 and not r.pnp_success

    def test_ir_order_invariant(self, noisy_scene):
        c = noisy_scene.corrs
        perm = np.random.default_rng(0).permutation(len(c))
        assert evaluate(c, ransac_iterations=50).inlier_ratio == evaluate(c.subset(perm),
                                                                           ransac_iterations=50).inlier_ratio

    def test_oracle_mask_never_lowers_ir(self, noisy_scene):
        c = noisy_scene.corrs
        assert evaluate(c.subset(c.gt_labels)).inlier_ratio >= evaluate(c).inlier_ratio

    def test_rr_scene_order_invariant(self):
        reports = [MetricsReport(0.5, 1.0, 0.1, float(i % 2)) for i in range(5)]
        assert aggregate(reports)["registration_recall"] == aggregate(reports[::-1])["registration_recall"]

    def test_csv_and_summary(self):
        reports = [MetricsReport(0.5, 1.0, 0.1, 1.0, scene="a"),
                   MetricsReport(0.25, float("nan"), float("nan"), 0.0, pnp_success=False, scene="b")]
        lines = reports_to_csv(reports).splitlines()
        assert lines[0] == "scene,ir,mre_deg,mte_m,rr_pass"
        assert lines[1] == "a,0.5,1,0.10000000000000001,1"
        assert lines[2].endswith(",0")
        s = aggregate(reports)
        assert s["mean_rotation_error"] == 1.0 and s["pnp_failures"] == 1
        assert "registration_recall: 0.5\n" in summary_text(s)


def test_epnp_planar_sample_is_degenerate():
    # EPnP stays available, but a planar five-point sample can mislead it; SQPnP is exact there
    from angle_i2p.pose import opencv_pnp_batch
    c = generate_scene(SceneConfig(n_points=20, seed=4)).corrs
    s = np.random.default_rng(0).choice(20, 5, replace=False)
    X = c.points[s]
    assert np.linalg.svd(X - X.mean(axis=0), compute_uv=False)[2] < 1e-9
    R_sq, _, _ = opencv_pnp_batch(X[None], c.pixels[s][None], c.intrinsics, "sqpnp")
    assert rotation_error(R_sq[0], c.gt_pose.rotation) < 1e-6
