"""Quantitative evaluation: trajectory error, depth error, rigidity segmentation and the feature probe."""

import io
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from core.errors import DegenerateGeometryError, ValidationError
from core.geometry import AlignmentMode, align_trajectories
from core.gradients import ParamVector
from core.rigidity import rigidity_mask, rigidity_matrix
from core.trackdata import SyntheticScene
from services.clustering import MotionClusters, extract_camera_trajectory
from services.optimizer import SE3Field

logger = logging.getLogger(__name__)

SEGMENTATION_THRESHOLD = 0.5


@dataclass(frozen=True)
class ProbeConfig:
    """Two-layer perceptron probe on frozen features."""
    hidden_units: int = 32
    epochs: int = 500
    lr: float = 1e-2
    threshold: float = SEGMENTATION_THRESHOLD

    def __post_init__(self):
        if self.threshold != SEGMENTATION_THRESHOLD:
            raise ValidationError(f"probe threshold is fixed at {SEGMENTATION_THRESHOLD}")
        if self.hidden_units < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValidationError("probe needs hidden_units >= 1, epochs >= 0 and lr > 0")


def depth_error(d_pred: np.ndarray, d_gt: np.ndarray, visibility: np.ndarray) -> float:
    """
    Mean squared depth error after the least-squares global scale.

    Raises:
        ValidationError: No visible entry
    """
    visibility = np.asarray(visibility, dtype=bool)
    if not visibility.any():
        raise ValidationError("depth error needs at least one visible entry")
    pred = np.asarray(d_pred, dtype=np.float64)[visibility]
    gt = np.asarray(d_gt, dtype=np.float64)[visibility]
    alpha = np.dot(pred, gt) / np.dot(pred, pred)
    return float(np.mean((alpha * pred - gt) ** 2))


def segmentation_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1 when both are empty."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class ProbeResult:
    model: torch.nn.Module
    iou: float
    train_index: np.ndarray
    test_index: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Foreground probabilities for raw (unstandardized) features."""
        x = torch.from_numpy((np.asarray(features, dtype=np.float64) - self.mean) / self.scale)
        with torch.no_grad():
            return torch.sigmoid(self.model(x)).squeeze(-1).numpy()


def train_probe(features: np.ndarray, labels: np.ndarray, cfg: Optional[ProbeConfig] = None,
                seed: int = 0) -> ProbeResult:
    """
    Train a D→hidden→1 perceptron on half of the tracks and score IOU on the other half.

    Raises:
        ValidationError: "degenerate labels" when the training half holds one class
    """
    cfg = cfg or ProbeConfig()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    labels = np.asarray(labels, dtype=bool)
    if len(features) != len(labels):
        raise ValidationError(f"{len(features)} feature rows for {len(labels)} labels")

    order = np.random.default_rng(seed).permutation(len(labels))
    train, test = order[:len(order) // 2], order[len(order) // 2:]
    if labels[train].all() or not labels[train].any():
        raise ValidationError("degenerate labels")

    mean = features[train].mean(axis=0)
    scale = features[train].std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    x = torch.from_numpy((features - mean) / scale)
    y = torch.from_numpy(labels.astype(np.float64))

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = torch.nn.Sequential(
            torch.nn.Linear(features.shape[1], cfg.hidden_units),
            torch.nn.ReLU(),
            torch.nn.Linear(cfg.hidden_units, 1),
        ).double()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    criterion = torch.nn.BCEWithLogitsLoss()
    train_t = torch.from_numpy(train)
    for _ in range(cfg.epochs):
        optimizer.zero_grad()
        loss = criterion(model(x[train_t]).squeeze(-1), y[train_t])
        loss.backward()
        optimizer.step()

    result = ProbeResult(model, math.nan, train, test, mean, scale)
    predicted = result.predict(features[test]) > cfg.threshold
    result.iou = segmentation_iou(predicted, labels[test])
    logger.info("Probe IOU %.4f on %d held-out tracks", result.iou, len(test))
    return result


def cluster_agreement(assignment: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of tracks whose cluster matches their label under the best label matching."""
    assignment = np.asarray(assignment, dtype=int)
    labels = np.asarray(labels, dtype=int)
    confusion = np.zeros((assignment.max() + 1, labels.max() + 1))
    np.add.at(confusion, (assignment, labels), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(confusion[rows, cols].sum() / len(labels))


def representative_track(scene: SyntheticScene, body: int) -> int:
    """Track of the body whose mean image position is nearest the body's centroid."""
    members = np.flatnonzero(scene.body_of_track == body)
    positions = scene.tracks.positions[members]
    visible = scene.tracks.visibility[members]
    counts = np.maximum(visible.sum(axis=1), 1)
    means = np.nansum(positions, axis=1) / counts[:, None]
    seen = visible.any(axis=1)
    centroid = means[seen].mean(axis=0)
    distances = np.where(seen, np.linalg.norm(means - centroid, axis=1), np.inf)
    return int(members[np.argmin(distances)])


def _rigidity_means(theta: ParamVector, body_of_track: np.ndarray):
    features = torch.tensor(theta.embeddings.features, dtype=torch.float64)
    with torch.no_grad():
        rigidity = rigidity_matrix(features).numpy()
    same = body_of_track[:, None] == body_of_track[None, :]
    off_diagonal = ~np.eye(len(body_of_track), dtype=bool)
    within = rigidity[same & off_diagonal]
    across = rigidity[~same]
    return (float(within.mean()) if len(within) else math.nan,
            float(across.mean()) if len(across) else math.nan)


class EvaluationReport:
    """Named scalar metrics, written as key=value text and as a CSV row with the same keys."""

    def __init__(self, metrics: Optional[Dict[str, float]] = None):
        self.metrics: Dict[str, float] = dict(metrics or {})

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def __contains__(self, key: str) -> bool:
        return key in self.metrics

    def keys(self):
        return list(self.metrics)

    def to_text(self) -> str:
        return "".join(f"{key}={float(value)!r}\n" for key, value in self.metrics.items())

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.metrics) + "\n")
        out.write(",".join(repr(float(v)) for v in self.metrics.values()) + "\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "EvaluationReport":
        metrics = {}
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValidationError(f"report line {number} is not key=value: {line!r}")
            metrics[key.strip()] = float(value)
        return cls(metrics)


def evaluate_scene(scene: SyntheticScene, theta: ParamVector, field: SE3Field,
                   clusters: Optional[MotionClusters] = None,
                   mode: AlignmentMode = AlignmentMode.SIM3) -> EvaluationReport:
    """
    Score a fitted scene against its ground truth.

    Keys: ate_sim3 (or ate_se3), depth_mse, mean_residual_px, iou_background, iou_body_<b>,
    rigidity_within, rigidity_across and, with clusters, cluster_agreement.
    The ATE needs clusters to pick the camera trajectory from; without them it is NaN.
    """
    tracks = scene.tracks
    metrics: Dict[str, float] = {}

    ate = math.nan
    if clusters is not None:
        estimate = extract_camera_trajectory(clusters)
        try:
            _, ate = align_trajectories(estimate, scene.camera_trajectory, mode)
        except DegenerateGeometryError as e:
            logger.warning("ATE undefined: %s", e)
    metrics[f"ate_{mode.value.lower()}"] = ate

    depths = np.exp(theta.log_depths)
    metrics["depth_mse"] = depth_error(depths, np.abs(scene.gt_depths), tracks.visibility)
    residuals = field.residuals[np.isfinite(field.residuals)]
    metrics["mean_residual_px"] = float(residuals.mean()) if len(residuals) else math.nan

    embeddings = theta.embeddings
    for body in range(scene.n_bodies + 1):
        truth = scene.body_of_track == body
        if not truth.any():
            continue
        query = representative_track(scene, body)
        predicted = rigidity_mask(embeddings, query) > SEGMENTATION_THRESHOLD
        key = "iou_background" if body == 0 else f"iou_body_{body}"
        metrics[key] = segmentation_iou(predicted, truth)

    metrics["rigidity_within"], metrics["rigidity_across"] = _rigidity_means(
        theta, scene.body_of_track)
    if clusters is not None:
        metrics["cluster_agreement"] = cluster_agreement(clusters.assignment, scene.body_of_track)
    logger.info("Evaluation: %s", ", ".join(f"{k}={v:.4g}" for k, v in metrics.items()))
    return EvaluationReport(metrics)
