import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angle_i2p.geometry import CorrespondenceSet, GeometryError
from angle_i2p.graph import (HierGraph, build_graphs, default_node_count, knn_assign, knn_indices,
                             sample_nodes, select_global_keypoints)
from angle_i2p.reference import ref_consistency_matrix, ref_fps, ref_knn
from angle_i2p.synth import SceneConfig, generate_scene

from conftest import make_set


def cloud_set(points) -> CorrespondenceSet:
    points = np.asarray(points, dtype=np.float64)
    return make_set(points + np.array([0.0, 0.0, 30.0]), points)


def two_clusters(seed=0, n=20):
    rng = np.random.default_rng(seed)
    a = rng.normal(scale=0.2, size=(n, 3))
    b = rng.normal(scale=0.2, size=(n, 3)) + np.array([10.0, 0.0, 0.0])
    return cloud_set(np.vstack([a, b]))


class TestSampleNodes:
    def test_all_points(self, noisy_scene):
        c = noisy_scene.corrs
        nodes = sample_nodes(c, len(c))
        assert sorted(nodes.indices.tolist()) == list(range(len(c)))
        np.testing.assert_array_equal(nodes.indices, ref_fps(c.points, len(c)))

    def test_single_node_is_nearest_centroid(self, noisy_scene):
        c = noisy_scene.corrs
        nearest = int(np.argmin(np.linalg.norm(c.points - c.points.mean(axis=0), axis=1)))
        assert sample_nodes(c, 1).indices.tolist() == [nearest]

    def test_two_clusters(self):
        c = two_clusters()
        idx = sample_nodes(c, 2).indices
        assert len({int(i) // 20 for i in idx}) == 2

    def test_too_many(self, noisy_scene):
        with pytest.raises(GeometryError):
            sample_nodes(noisy_scene.corrs, 81)

    def test_seed_does_not_change_fps(self, noisy_scene):
        a = sample_nodes(noisy_scene.corrs, 7, seed=1).indices
        b = sample_nodes(noisy_scene.corrs, 7, seed=99).indices
        np.testing.assert_array_equal(a, b)


class TestKnn:
    def test_k1_is_self(self, noisy_scene):
        c = noisy_scene.corrs
        nodes = sample_nodes(c, 6)
        np.testing.assert_array_equal(knn_assign(nodes, c, 1)[:, 0], nodes.indices)

    def test_grid_axis_neighbours(self):
        g = np.array([(x, y, 0.0) for x in range(5) for y in range(5)])
        c = cloud_set(g)
        centre = 12
        nodes = sample_nodes(c, 1)
        assert nodes.indices[0] == centre
        group = knn_assign(nodes, c, 5)[0]
        assert group[0] == centre
        assert set(group[1:].tolist()) == {7, 11, 13, 17}

    def test_ties_go_to_lower_index(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0.0]])
        np.testing.assert_array_equal(knn_indices(pts[:1], pts, 3), [[0, 1, 2]])

    def test_too_many(self, noisy_scene):
        with pytest.raises(GeometryError):
            knn_assign(sample_nodes(noisy_scene.corrs, 2), noisy_scene.corrs, 81)

    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        # a coarse lattice forces plenty of distance ties
        pts = rng.integers(-3, 4, size=(n, 3)).astype(np.float64)
        c = cloud_set(pts)
        V = int(rng.integers(1, n + 1))
        K = int(rng.integers(1, n + 1))
        nodes = sample_nodes(c, V)
        np.testing.assert_array_equal(nodes.indices, ref_fps(pts, V))
        np.testing.assert_array_equal(knn_assign(nodes, c, K), ref_knn(nodes.nodes, pts, K))


class TestGlobalKeypoints:
    def test_all(self, noisy_scene):
        keys = select_global_keypoints(noisy_scene.corrs, 80)
        assert sorted(keys.tolist()) == list(range(80))

    def test_two_clusters(self):
        keys = select_global_keypoints(two_clusters(), 2)
        assert len({int(i) // 20 for i in keys}) == 2

    def test_deterministic(self, noisy_scene):
        np.testing.assert_array_equal(select_global_keypoints(noisy_scene.corrs, 30, seed=4),
                                      select_global_keypoints(noisy_scene.corrs, 30, seed=4))

    def test_external_saliency(self, noisy_scene):
        sal = np.arange(80)[::-1].astype(float)
        np.testing.assert_array_equal(select_global_keypoints(noisy_scene.corrs, 3, saliency=sal), [0, 1, 2])

    def test_too_many(self, noisy_scene):
        with pytest.raises(GeometryError):
            select_global_keypoints(noisy_scene.corrs, 81)


class TestBuildGraphs:
    def test_shapes_and_defaults(self):
        c = generate_scene(SceneConfig(n_points=200, seed=3, outlier_ratio=0.5)).corrs
        g = build_graphs(c)
        V = default_node_count(200)
        assert V == 13
        assert g.local_groups.shape == (V, 32)
        assert g.global_keypoints.shape == (100,)
        assert g.global_groups.shape == (V, 32)
        assert g.theta_local.shape == (V, 32, 32) and g.theta_global.shape == (V, 32, 32)
        assert g.global_groups.max() < 100

    def test_noiseless_all_inlier(self, clean_scene):
        g = build_graphs(clean_scene.corrs, K=16, M=40)
        assert np.abs(g.theta_local - 1).max() < 1e-9
        assert np.abs(g.theta_global - 1).max() < 1e-9

    def test_matches_scalar_oracle(self, noisy_scene):
        c = noisy_scene.corrs
        for mode in ("angle", "distance"):
            g = build_graphs(c, K=10, M=30, k_global=8, mode=mode)
            for j, grp in enumerate(g.local_groups):
                np.testing.assert_array_equal(g.theta_local[j], ref_consistency_matrix(c.est_points, c.points, grp,
                                                                                       0.1, mode))
            for j, grp in enumerate(g.global_corr_groups):
                np.testing.assert_array_equal(g.theta_global[j], ref_consistency_matrix(c.est_points, c.points,
                                                                                        grp, 0.1, mode))

    def test_theta_properties(self, noisy_scene):
        g = build_graphs(noisy_scene.corrs, K=12, M=30)
        for th in list(g.theta_local) + list(g.theta_global):
            np.testing.assert_array_equal(th, th.transpose())
            np.testing.assert_array_equal(np.diag(th), 1.0)
            assert th.min() >= 0 and th.max() <= 1

    def test_k_global_bounded_by_m(self, noisy_scene):
        with pytest.raises(GeometryError):
            build_graphs(noisy_scene.corrs, K=8, M=10, k_global=11)

    def test_deterministic_bytes(self, noisy_scene):
        a = build_graphs(noisy_scene.corrs, K=12, M=30).to_bytes()
        b = build_graphs(noisy_scene.corrs, K=12, M=30).to_bytes()
        assert a == b

    def test_coverage(self):
        c = generate_scene(SceneConfig(n_points=160, seed=8, outlier_ratio=0.3)).corrs
        g = build_graphs(c, K=32, M=100)
        assert len(np.unique(g.local_groups)) == 160

    def test_permutation_keeps_group_sets(self, noisy_scene):
        c = noisy_scene.corrs
        perm = np.random.default_rng(2).permutation(len(c))
        cp = c.subset(perm)
        a = build_graphs(c, K=10, M=30)
        b = build_graphs(cp, K=10, M=30)
        sets_a = {frozenset(c.points[i].tobytes() for i in grp) for grp in a.local_groups}
        sets_b = {frozenset(cp.points[i].tobytes() for i in grp) for grp in b.local_groups}
        assert sets_a == sets_b


class TestGraphBlob:
    def test_round_trip(self, noisy_scene):
        g = build_graphs(noisy_scene.corrs, K=10, M=25, k_global=7)
        blob = g.to_bytes()
        assert blob[:5] == b"AGHG1"
        h = HierGraph.from_bytes(blob)
        for name in ("node_indices", "local_groups", "global_keypoints", "global_groups", "theta_local",
                     "theta_global"):
            np.testing.assert_array_equal(getattr(g, name), getattr(h, name))
        assert h.to_bytes() == blob

    def test_header_layout(self, noisy_scene):
        g = build_graphs(noisy_scene.corrs, K=10, M=25, k_global=7)
        V = len(g.node_indices)
        assert np.frombuffer(g.to_bytes()[5:37], dtype="<i8").tolist() == [V, 10, 25, 7]

    def test_rejects_bad_magic_and_trailing(self, noisy_scene):
        blob = build_graphs(noisy_scene.corrs, K=10, M=25).to_bytes()
        with pytest.raises(ValueError):
            HierGraph.from_bytes(b"XXXXX" + blob[5:])
        with pytest.raises(ValueError):
            HierGraph.from_bytes(blob + b"\0" * 8)
