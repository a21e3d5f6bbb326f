import numpy as np
import pytest

from pointinst3d.clustering import (
    Cluster,
    ClusteringConfig,
    canonical_partition,
    cluster_bruteforce_oracle,
    cluster_homogeneous,
    cluster_purity,
)
from pointinst3d.scenes import SceneConfig, generate_scene, oracle_predictions


CFG = ClusteringConfig(radius=0.3, stuff_labels=frozenset({0}), min_report_size=1)


def random_inputs(seed, n=300, classes=4, spread=0.15):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 3, size=(n, 3))
    offsets = rng.normal(0, spread, size=(n, 3))
    labels = rng.integers(0, classes, size=n)
    return coords, offsets, labels


class TestTrivia:
    def test_single_point_singleton_cluster(self):
        clusters = cluster_homogeneous([[1.0, 2.0, 3.0]], [[0.1, 0.0, 0.0]], [2], CFG)
        assert len(clusters) == 1
        assert clusters[0].members.tolist() == [0]
        assert clusters[0].size == 1
        assert clusters[0].label == 2
        assert np.allclose(clusters[0].centroid, [1.0, 2.0, 3.0])

    def test_coincident_shifted_points_merge(self):
        coords = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        offsets = np.array([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]])
        cfg = ClusteringConfig(radius=0.01, stuff_labels=frozenset(), min_report_size=1)
        clusters = cluster_homogeneous(coords, offsets, [1, 1], cfg)
        assert len(clusters) == 1
        assert clusters[0].size == 2
        # centroid averages ORIGINAL coordinates
        assert np.allclose(clusters[0].centroid, [0.5, 0.0, 0.0])

    def test_chain_connectivity_through_middle(self):
        r = 0.5
        coords = np.array([[0.0, 0, 0], [0.45, 0, 0], [0.9, 0, 0]])
        cfg = ClusteringConfig(radius=r, stuff_labels=frozenset(), min_report_size=1)
        for op in (cluster_homogeneous, cluster_bruteforce_oracle):
            clusters = op(coords, np.zeros((3, 3)), [1, 1, 1], cfg)
            assert len(clusters) == 1 and clusters[0].size == 3

    def test_stuff_points_excluded(self):
        coords = np.zeros((4, 3))
        clusters = cluster_homogeneous(coords, np.zeros((4, 3)), [0, 1, 0, 1], CFG)
        covered = sorted(int(i) for c in clusters for i in c.members)
        assert covered == [1, 3]

    def test_strict_radius_boundary(self):
        coords = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        cfg = ClusteringConfig(radius=1.0, stuff_labels=frozenset(), min_report_size=1)
        clusters = cluster_homogeneous(coords, np.zeros((2, 3)), [1, 1], cfg)
        assert len(clusters) == 2


class TestErrors:
    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            cluster_homogeneous(np.zeros((3, 3)), np.zeros((2, 3)), [1, 1, 1], CFG)

    def test_negative_label_names_index(self):
        with pytest.raises(ValueError, match="index 1"):
            cluster_homogeneous(np.zeros((2, 3)), np.zeros((2, 3)), [1, -2], CFG)

    def test_radius_validated(self):
        with pytest.raises(ValueError):
            ClusteringConfig(radius=0.0)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(40))
    def test_partitions_identical(self, seed):
        rng = np.random.default_rng(seed)
        coords, offsets, labels = random_inputs(seed, n=int(rng.integers(20, 300)))
        cfg = ClusteringConfig(radius=float(rng.uniform(0.05, 0.5)),
                               stuff_labels=frozenset({0}), min_report_size=1)
        fast = cluster_homogeneous(coords, offsets, labels, cfg)
        slow = cluster_bruteforce_oracle(coords, offsets, labels, cfg)
        assert canonical_partition(fast) == canonical_partition(slow)
        # metadata agrees too, both directions of the comparison
        for a, b in zip(sorted(fast, key=lambda c: c.members[0]),
                        sorted(slow, key=lambda c: c.members[0])):
            assert a.label == b.label
            assert np.allclose(a.centroid, b.centroid, atol=1e-12)


class TestProperties:
    def test_partition_covers_non_stuff(self):
        coords, offsets, labels = random_inputs(5)
        clusters = cluster_homogeneous(coords, offsets, labels, CFG)
        seen = sorted(int(i) for c in clusters for i in c.members)
        assert seen == sorted(np.flatnonzero(labels != 0).tolist())
        assert len(seen) == len(set(seen))

    def test_label_purity(self):
        coords, offsets, labels = random_inputs(6)
        for cluster in cluster_homogeneous(coords, offsets, labels, CFG):
            assert np.all(labels[cluster.members] == cluster.label)

    def test_radius_monotonicity_refinement(self):
        coords, offsets, labels = random_inputs(7, n=200)
        small = cluster_homogeneous(coords, offsets, labels,
                                    ClusteringConfig(radius=0.15, stuff_labels=frozenset({0})))
        big = cluster_homogeneous(coords, offsets, labels,
                                  ClusteringConfig(radius=0.4, stuff_labels=frozenset({0})))
        coarse = {}
        for k, cluster in enumerate(big):
            for i in cluster.members:
                coarse[int(i)] = k
        for cluster in small:
            owners = {coarse[int(i)] for i in cluster.members}
            assert len(owners) == 1

    def test_deterministic_seed_order(self):
        coords, offsets, labels = random_inputs(8, n=150)
        clusters = cluster_homogeneous(coords, offsets, labels, CFG)
        seeds = [int(c.members[0]) for c in clusters]
        assert seeds == sorted(seeds)
        again = cluster_homogeneous(coords, offsets, labels, CFG)
        assert canonical_partition(clusters) == canonical_partition(again)

    def test_exact_recovery_with_oracle_offsets(self):
        scene = generate_scene(SceneConfig(seed=13, d_min=1.0))
        _, offsets = oracle_predictions(scene, offset_sigma=0.0)
        for r in (0.1, 0.5, 0.9):
            cfg = ClusteringConfig(radius=r, stuff_labels=frozenset({0}), min_report_size=1)
            clusters = cluster_homogeneous(scene.coords, offsets, scene.gt_semantic, cfg)
            got = canonical_partition(clusters)
            want = tuple(sorted(
                tuple(np.flatnonzero(scene.gt_instance == k).tolist())
                for k in np.unique(scene.gt_instance) if k >= 0
            ))
            assert got == want, f"r={r}"

    def test_purity_helper(self):
        members = np.array([0, 1, 2, 3], dtype=np.intp)
        cluster = Cluster(members=members, centroid=np.zeros(3), label=1)
        purity = cluster_purity([cluster], np.array([4, 4, 4, 9]))
        assert purity == pytest.approx(0.75)
