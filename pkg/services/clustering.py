"""Rigid-motion clustering of per-track SE(3) trajectories and camera trajectory extraction."""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from sklearn.cluster import KMeans

from core.errors import ClusteringError
from core.geometry import SE3, se3_exp, unproject_points, project_points
from core.gradients import ParamVector
from core.trackdata import TrackSet
from services.optimizer import SE3Field

logger = logging.getLogger(__name__)

DEFAULT_CLUSTERS = 4
MAX_ITERATIONS = 200
MIN_CLUSTER_FRACTION = 0.02
# cluster losses are compared at this many decimals (pixels)
LOSS_DECIMALS = 6


@dataclass(frozen=True, eq=False)
class MotionClusters:
    """
    Hard assignment of tracks to rigid-motion clusters.

    Labels are canonical: clusters are numbered by decreasing size, ties
    broken by their centroid features in lexicographic order.
    """
    assignment: np.ndarray
    centroids: List[List[SE3]]
    inlier_loss: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == label)

    def to_dict(self) -> dict:
        return {
            "assignment": [int(a) for a in self.assignment],
            "centroids": [[pose.matrix.tolist() for pose in centroid] for centroid in self.centroids],
            "inlier_loss": [float(v) for v in self.inlier_loss],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MotionClusters":
        centroids = [[SE3.from_matrix(np.array(m)) for m in centroid] for centroid in data["centroids"]]
        return cls(np.array(data["assignment"], dtype=int), centroids,
                   np.array(data["inlier_loss"], dtype=np.float64))


def trajectory_features(field: SE3Field, median_depth: float = 1.0) -> np.ndarray:
    """N×6(T−1) se3_log features with translations divided by the scene's median depth."""
    if not median_depth > 0:
        raise ClusteringError(f"median depth must be positive, got {median_depth}")
    logs = field.log_features()
    logs[..., 3:] /= median_depth
    return logs.reshape(field.n_tracks, -1)


def _nearest(features: np.ndarray, centres: np.ndarray) -> np.ndarray:
    """Nearest centre per row, comparing only the finite coordinates of each row."""
    labels = np.zeros(len(features), dtype=int)
    for i, row in enumerate(features):
        finite = np.isfinite(row)
        if not finite.any():
            continue
        distances = np.sum((centres[:, finite] - row[finite]) ** 2, axis=1)
        labels[i] = int(np.argmin(distances))
    return labels


def _centres(features: np.ndarray, labels: np.ndarray, n_clusters: int) -> np.ndarray:
    return np.stack([features[labels == k].mean(axis=0) for k in range(n_clusters)])


def _canonical_order(labels: np.ndarray, centres: np.ndarray) -> np.ndarray:
    sizes = np.bincount(labels, minlength=len(centres))
    return np.array(sorted(range(len(centres)),
                           key=lambda k: (-sizes[k], tuple(np.round(centres[k], 12)))), dtype=int)


def cluster_trajectories(field: SE3Field, n_clusters: int = DEFAULT_CLUSTERS, seed: int = 0,
                         median_depth: float = 1.0,
                         min_fraction: float = MIN_CLUSTER_FRACTION,
                         tracks: Optional[TrackSet] = None,
                         theta: Optional[ParamVector] = None) -> MotionClusters:
    """
    K-means over per-track se3_log trajectories.

    Tracks with a transform on every frame pair are clustered; the rest join
    the nearest centroid by their available coordinates. Clusters holding
    fewer than min_fraction of the tracks are dissolved into their neighbours.

    Args:
        field: Solved per-track transforms
        n_clusters: Requested cluster count
        seed: k-means++ seed
        median_depth: Scene depth scale dividing the translation features
        min_fraction: Pruning threshold on cluster size
        tracks: Observed tracks; with theta, inlier_loss is the centroid reprojection error
        theta: Fitted parameters supplying the depths for that error

    Returns:
        MotionClusters with canonical labels

    Raises:
        ClusteringError: More clusters requested than complete tracks
    """
    if n_clusters < 1:
        raise ClusteringError(f"need at least one cluster, got {n_clusters}")
    features = trajectory_features(field, median_depth)
    complete = np.all(np.isfinite(features), axis=1)
    n_complete = int(complete.sum())
    if n_clusters > n_complete:
        raise ClusteringError(
            f"too many clusters: {n_clusters} requested, {n_complete} complete tracks")

    model = KMeans(n_clusters=n_clusters, init="k-means++", n_init=1,
                   max_iter=MAX_ITERATIONS, random_state=seed)
    labels = model.fit_predict(features[complete])
    centres = _centres(features[complete], labels, n_clusters)

    sizes = np.bincount(labels, minlength=n_clusters)
    keep = sizes >= min_fraction * n_complete
    keep[np.argmax(sizes)] = True
    if not keep.all():
        logger.info("Pruning %d clusters below %.0f%% of the tracks",
                    int((~keep).sum()), 100 * min_fraction)
        centres = centres[keep]
        labels = _nearest(features[complete], centres)
        centres = _centres(features[complete], labels, len(centres))

    order = _canonical_order(labels, centres)
    relabel = np.empty(len(order), dtype=int)
    relabel[order] = np.arange(len(order))
    centres = centres[order]

    assignment = np.empty(field.n_tracks, dtype=int)
    assignment[complete] = relabel[labels]
    if not complete.all():
        assignment[~complete] = _nearest(features[~complete], centres)

    pairs = centres.reshape(len(centres), field.n_pairs, 6).copy()
    pairs[..., 3:] *= median_depth
    centroids = [[se3_exp(xi) for xi in centroid] for centroid in pairs]

    inlier_loss = np.empty(len(centres))
    for k in range(len(centres)):
        residuals = field.residuals[assignment == k]
        finite = residuals[np.isfinite(residuals)]
        inlier_loss[k] = finite.mean() if len(finite) else math.inf
    if tracks is not None and theta is not None:
        inlier_loss = centroid_residuals(MotionClusters(assignment, centroids, inlier_loss),
                                         tracks, theta)
    logger.info("Clustered %d tracks into %d motions (sizes %s)", field.n_tracks,
                len(centres), np.bincount(assignment, minlength=len(centres)).tolist())
    return MotionClusters(assignment, centroids, inlier_loss)


def centroid_residuals(clusters: MotionClusters, tracks: TrackSet, theta: ParamVector) -> np.ndarray:
    """
    Mean reprojection error of each cluster's members under the cluster centroid motion.

    Returns:
        K-vector in pixels, inf for clusters with no visible member pair
    """
    depths = np.exp(theta.log_depths)
    K = tracks.intrinsics
    out = np.full(clusters.n_clusters, math.inf)
    for k in range(clusters.n_clusters):
        members = clusters.members(k)
        errors = []
        for t, motion in enumerate(clusters.centroids[k]):
            visible = members[tracks.joint_visibility(t)[members]]
            if len(visible) == 0:
                continue
            points = unproject_points(K, tracks.positions[visible, t], depths[visible, t])
            moved = motion.apply(points)
            in_front = moved[:, 2] > 0
            if not in_front.all():
                errors.extend([math.inf] * int((~in_front).sum()))
            if in_front.any():
                predicted = project_points(K, moved[in_front])
                errors.extend(np.linalg.norm(
                    predicted - tracks.positions[visible[in_front], t + 1], axis=1))
        if errors:
            out[k] = float(np.mean(errors))
    return out


def select_camera_cluster(clusters: MotionClusters) -> int:
    """Minimum-inlier_loss cluster; ties go to the larger cluster, then the lower label."""
    losses = np.round(clusters.inlier_loss, LOSS_DECIMALS)
    sizes = clusters.sizes
    return min(range(clusters.n_clusters), key=lambda k: (losses[k], -sizes[k], k))


def compose_trajectory(pair_motions: List[SE3]) -> List[SE3]:
    """World-to-camera poses from identity at frame 0, pose_{t+1} = P_t ∘ pose_t."""
    poses = [SE3.identity()]
    for motion in pair_motions:
        poses.append(motion @ poses[-1])
    return poses


def extract_camera_trajectory(clusters: MotionClusters) -> List[SE3]:
    """Camera trajectory of the cluster with the lowest inlier_loss."""
    if clusters.n_clusters == 0:
        raise ClusteringError("no clusters to select from")
    label = select_camera_cluster(clusters)
    logger.info("Camera cluster %d of %d (%d tracks)", label, clusters.n_clusters,
                int(clusters.sizes[label]))
    return compose_trajectory(clusters.centroids[label])
