import math

import numpy as np
import pytest

from core.errors import ClusteringError
from core.geometry import SE3, se3_exp
from services.clustering import (MotionClusters, centroid_residuals, cluster_trajectories,
                                 compose_trajectory,
                                 extract_camera_trajectory, select_camera_cluster,
                                 trajectory_features)
from services.optimizer import LossConfig, SE3Field, forward_pass
from tests.conftest import block_embeddings, ground_truth_theta


def make_field(groups, residual=0.0):
    """SE3Field with `count` identical tracks per (count, motions) group."""
    motions = [motion for count, sequence in groups for motion in [sequence] * count]
    n_pairs = len(motions[0])
    rotations = np.array([[m.rotation for m in seq] for seq in motions])
    translations = np.array([[m.translation for m in seq] for seq in motions])
    valid = np.ones((len(motions), n_pairs), dtype=bool)
    return SE3Field(rotations, translations, valid, np.full(valid.shape, residual))


def sequence(*twists):
    return [se3_exp(np.array(xi, dtype=np.float64)) for xi in twists]


FORWARD = sequence([0, 0, 0, 0, 0, 0.1], [0, 0, 0, 0, 0, 0.1])
SPIN = sequence([0, 0.3, 0, 0.2, 0, 0], [0, 0.3, 0, 0.2, 0, 0])


class TestClusterTrajectories:
    def test_single_shared_trajectory(self):
        clusters = cluster_trajectories(make_field([(10, FORWARD)]), n_clusters=1)
        assert clusters.n_clusters == 1
        np.testing.assert_array_equal(clusters.assignment, np.zeros(10))
        for centroid, expected in zip(clusters.centroids[0], FORWARD):
            assert centroid.allclose(expected, atol=1e-9)

    def test_two_exact_groups(self):
        clusters = cluster_trajectories(make_field([(6, FORWARD), (9, SPIN)]), n_clusters=2)
        np.testing.assert_array_equal(clusters.assignment, [1] * 6 + [0] * 9)
        np.testing.assert_array_equal(clusters.sizes, [9, 6])

    def test_too_many_clusters(self):
        with pytest.raises(ClusteringError, match="too many clusters"):
            cluster_trajectories(make_field([(3, FORWARD)]), n_clusters=4)

    def test_tiny_cluster_is_pruned(self):
        clusters = cluster_trajectories(make_field([(60, FORWARD), (1, SPIN)]), n_clusters=2)
        assert clusters.n_clusters == 1
        assert np.all(clusters.assignment == 0)

    def test_incomplete_track_joins_nearest_cluster(self):
        field = make_field([(6, FORWARD), (6, SPIN)])
        valid = field.valid.copy()
        valid[0, 1] = False
        valid[11, 0] = False
        partial = SE3Field(field.rotations, field.translations, valid, field.residuals)
        clusters = cluster_trajectories(partial, n_clusters=2)
        assert clusters.assignment[0] == clusters.assignment[1]
        assert clusters.assignment[11] == clusters.assignment[10]
        assert clusters.assignment[0] != clusters.assignment[11]

    def test_is_deterministic(self):
        field = make_field([(5, FORWARD), (7, SPIN)])
        a = cluster_trajectories(field, n_clusters=2, seed=3)
        b = cluster_trajectories(field, n_clusters=2, seed=3)
        np.testing.assert_array_equal(a.assignment, b.assignment)

    def test_translation_features_scale_with_depth(self):
        field = make_field([(4, FORWARD)])
        near = trajectory_features(field, median_depth=1.0)
        far = trajectory_features(field, median_depth=10.0)
        assert far[0, 5] == pytest.approx(near[0, 5] / 10.0)
        with pytest.raises(ClusteringError):
            trajectory_features(field, median_depth=0.0)

    def test_inlier_loss_and_dict_roundtrip(self):
        clusters = cluster_trajectories(make_field([(4, FORWARD)], residual=0.25), n_clusters=1)
        assert clusters.inlier_loss[0] == pytest.approx(0.25)
        restored = MotionClusters.from_dict(clusters.to_dict())
        np.testing.assert_array_equal(restored.assignment, clusters.assignment)
        assert restored.centroids[0][1].allclose(clusters.centroids[0][1], atol=0.0)

    def test_bodies_of_ground_truth_field(self, two_body_scene):
        theta = ground_truth_theta(two_body_scene, block_embeddings(two_body_scene.body_of_track))
        field = forward_pass(two_body_scene.tracks, theta, LossConfig()).field
        clusters = cluster_trajectories(field, n_clusters=3,
                                        median_depth=float(np.median(np.abs(two_body_scene.gt_depths))))
        labels = set()
        for body in range(3):
            members = clusters.assignment[two_body_scene.body_of_track == body]
            assert len(set(members.tolist())) == 1
            labels.add(int(members[0]))
        assert len(labels) == 3

    def test_invariant_to_track_order(self, two_body_scene):
        theta = ground_truth_theta(two_body_scene, block_embeddings(two_body_scene.body_of_track))
        field = forward_pass(two_body_scene.tracks, theta, LossConfig()).field
        order = np.random.default_rng(3).permutation(field.n_tracks)
        shuffled = SE3Field(field.rotations[order], field.translations[order], field.valid[order],
                            field.residuals[order])
        median_depth = float(np.median(np.abs(two_body_scene.gt_depths)))
        clusters = cluster_trajectories(field, n_clusters=3, median_depth=median_depth)
        reordered = cluster_trajectories(shuffled, n_clusters=3, median_depth=median_depth)
        np.testing.assert_array_equal(reordered.assignment, clusters.assignment[order])
        for a, b in zip(clusters.centroids, reordered.centroids):
            for x, y in zip(a, b):
                assert x.allclose(y, atol=1e-9)


class TestCameraTrajectory:
    def test_compose_starts_at_identity(self):
        poses = compose_trajectory(FORWARD)
        assert len(poses) == 3
        assert poses[0].allclose(SE3.identity(), atol=0.0)
        assert poses[2].allclose(FORWARD[1] @ FORWARD[0], atol=1e-12)

    def test_tie_breaks_by_size_then_label(self):
        clusters = MotionClusters(np.array([0, 0, 1, 1, 1, 2, 2, 2]), [FORWARD, SPIN, FORWARD],
                                  np.array([0.5, 0.5, 0.5]))
        assert select_camera_cluster(clusters) == 1
        lower = MotionClusters(clusters.assignment, clusters.centroids, np.array([0.1, 0.5, 0.5]))
        assert select_camera_cluster(lower) == 0

    def test_selects_the_lowest_stored_inlier_loss(self):
        clusters = MotionClusters(np.array([0, 0, 0, 1]), [SPIN, FORWARD], np.array([0.1, 5.0]))
        label = select_camera_cluster(clusters)
        assert label == 0
        assert all(clusters.inlier_loss[label] <= loss for loss in clusters.inlier_loss)
        trajectory = extract_camera_trajectory(clusters)
        assert trajectory[2].allclose(SPIN[1] @ SPIN[0], atol=1e-12)

    def test_static_scene_recovers_camera(self, static_scene):
        field = forward_pass(static_scene.tracks, ground_truth_theta(static_scene), LossConfig()).field
        clusters = cluster_trajectories(field, n_clusters=1)
        trajectory = extract_camera_trajectory(clusters)
        for estimated, expected in zip(trajectory, static_scene.camera_trajectory):
            assert estimated.allclose(expected, atol=1e-6)

    def test_scored_by_centroid_reprojection(self, one_body_scene):
        theta = ground_truth_theta(one_body_scene, block_embeddings(one_body_scene.body_of_track))
        field = forward_pass(one_body_scene.tracks, theta, LossConfig()).field
        clusters = cluster_trajectories(field, n_clusters=2, tracks=one_body_scene.tracks,
                                        theta=theta)
        np.testing.assert_allclose(clusters.inlier_loss,
                                   centroid_residuals(clusters, one_body_scene.tracks, theta))
        assert np.all(clusters.inlier_loss < 1e-6)
        trajectory = extract_camera_trajectory(clusters)
        for estimated, expected in zip(trajectory, one_body_scene.camera_trajectory):
            assert estimated.allclose(expected, atol=1e-6)

    def test_no_clusters(self):
        with pytest.raises(ClusteringError):
            extract_camera_trajectory(MotionClusters(np.zeros(0, dtype=int), [], np.zeros(0)))


def test_infinite_inlier_loss_for_unsupervised_cluster():
    field = make_field([(4, FORWARD)], residual=math.nan)
    clusters = cluster_trajectories(field, n_clusters=1)
    assert math.isinf(clusters.inlier_loss[0])
