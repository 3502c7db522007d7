"""Run-directory service shared by the command line and the tool server."""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from core.config import FitConfig, format_value
from core.errors import ClusteringError, RigidTrackError, ValidationError
from core.gradients import GradientCheckReport, ParamLayout, ParamVector, check_gradients
from core.rigidity import feature_pca, rigidity_response_grid
from core.trackdata import (SceneSpec, TrackSet, generate_scene, load_scene, load_tracks,
                            save_scene, save_tracks)
from services.clustering import (MotionClusters, cluster_trajectories,
                                 compose_trajectory, extract_camera_trajectory,
                                 select_camera_cluster)
from services.evaluation import EvaluationReport, evaluate_scene
from services.exporters import (export_feature_pca_ppm, export_pointcloud_ply,
                                export_rigidity_map_pgm, export_se3_components_csv,
                                export_trajectory_tum, pca_colors)
from services.optimizer import (FitResult, FitSchedule, ForwardResult, LossConfig, SE3Field,
                                SceneObjective, forward_pass,
                                is_smoothed_non_increasing, pretrained_fit, static_mode_fit)
from utils.helpers import configure_threads, format_table_row, grid_indices

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RIGIDITY_GRID = (3, 3)
GRADIENT_CHECK_SPEC = SceneSpec(n_bodies=0, tracks_per_body=4, n_static_tracks=8, n_frames=3)
GRADIENT_CHECK_EMBEDDING_DIM = 4


@dataclass
class SynthRun:
    tracks_path: Path
    sidecar_path: Path
    spec_path: Path

    def summary(self) -> str:
        return (f"Scene written: tracks={self.tracks_path}, "
                f"ground truth={self.sidecar_path}, spec={self.spec_path}")


@dataclass
class FitRun:
    run_dir: Path
    result: FitResult
    forward: ForwardResult
    clusters: MotionClusters
    camera_cluster: int
    artifacts: List[Path] = field(default_factory=list)

    def summary(self) -> str:
        widths = [8, 8, 14]
        lines = [
            f"Run: {self.run_dir}",
            f"Final loss: {self.forward.loss:.6e}",
            f"Mean residual: {self.forward.mean_residual:.4f} px",
            "",
            format_table_row(["cluster", "tracks", "inlier px"], widths),
        ]
        for k, size in enumerate(self.clusters.sizes):
            marker = "*" if k == self.camera_cluster else ""
            lines.append(format_table_row(
                [f"{k}{marker}", str(size), f"{self.clusters.inlier_loss[k]:.4f}"], widths))
        return "\n".join(lines)


@dataclass
class LoadedRun:
    tracks: TrackSet
    theta: ParamVector
    field: SE3Field
    clusters: MotionClusters


def save_theta(theta: ParamVector, path: PathLike) -> None:
    np.savez(path, **theta.unpack())


def load_theta(path: PathLike) -> ParamVector:
    with np.load(path) as data:
        return ParamVector.pack(data["log_depths"], data["embeddings"], data["confidence_logits"])


def load_depth_targets(sidecar_path: PathLike, tracks: TrackSet) -> np.ndarray:
    """Ground-truth depths of a scene sidecar, NaN where the track is invisible."""
    path = Path(sidecar_path)
    if not path.is_file():
        raise ValidationError(f"depth sidecar not found: {path}")
    depths = np.array(json.loads(path.read_text(encoding="utf-8"))["gt_depths"], dtype=np.float64)
    if depths.shape != tracks.visibility.shape:
        raise ValidationError(
            f"sidecar depths have shape {depths.shape}, tracks are {tracks.visibility.shape}")
    return np.where(tracks.visibility, depths, np.nan)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    return path


def check_coordinates(layout: ParamLayout, count: int, seed: int) -> Optional[np.ndarray]:
    """A sorted, seeded subset of coordinates to check, or None for every coordinate."""
    if count <= 0 or count >= layout.size:
        return None
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(layout.size, size=count, replace=False))


class RunService:
    """Service for synthesizing scenes and for fitting, evaluating and exporting runs."""

    def synth(self, spec: SceneSpec, out_dir: PathLike) -> SynthRun:
        """
        Generate a scene and write its tracks, ground-truth sidecar and spec.

        Args:
            spec: Scene parameters
            out_dir: Output directory

        Returns:
            Paths of the written files
        """
        scene = generate_scene(spec)
        tracks_path, sidecar_path = save_scene(scene, out_dir)
        spec_path = Path(out_dir) / "spec.json"
        spec_path.write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n",
                             encoding="utf-8")
        logger.info("Synthesized %d tracks over %d frames into %s",
                    scene.tracks.n_tracks, scene.tracks.n_frames, out_dir)
        return SynthRun(tracks_path, sidecar_path, spec_path)

    def gradient_check(self, tracks: TrackSet, theta: ParamVector, config: FitConfig,
                       depth_targets: Optional[np.ndarray] = None,
                       coordinates: Optional[np.ndarray] = None) -> GradientCheckReport:
        objective = SceneObjective(tracks, LossConfig.from_fit_config(config), theta.layout,
                                   config.static_mode, depth_targets)
        return check_gradients(objective, theta, coordinates=coordinates)

    def gradient_check_instance(self, config: FitConfig,
                                tracks_path: Optional[PathLike] = None) -> GradientCheckReport:
        """
        Check every gradient coordinate on a tracks file or on a small seeded scene.

        Log-depths are jittered away from the flat initialization so the check
        runs at a generic point.
        """
        if tracks_path is not None:
            tracks = load_tracks(tracks_path)
            layout = ParamLayout(tracks.n_tracks, tracks.n_frames, config.embedding_dim)
        else:
            spec = dataclasses.replace(GRADIENT_CHECK_SPEC, rng_seed=config.seed)
            tracks = generate_scene(spec).tracks
            layout = ParamLayout(tracks.n_tracks, tracks.n_frames, GRADIENT_CHECK_EMBEDDING_DIM)
        theta = ParamVector.initial(layout, config.seed)
        blocks = theta.unpack()
        blocks["log_depths"] += 0.1 * np.random.default_rng(config.seed).standard_normal(
            blocks["log_depths"].shape)
        theta = ParamVector.pack(**blocks)
        return self.gradient_check(tracks, theta, config)

    def fit(self, tracks_path: PathLike, out_dir: PathLike, config: FitConfig,
            depth_sidecar: Optional[PathLike] = None, export: bool = True) -> FitRun:
        """
        Fit a tracks file and write the run directory.

        Args:
            tracks_path: Tracks file
            out_dir: Run directory
            config: Resolved fit configuration
            depth_sidecar: Optional ground-truth sidecar supplying depth targets
            export: Also write the exported artifacts

        Returns:
            FitRun with the fit result, solved field and clusters

        Raises:
            RigidTrackError: Gradient check failure, non-finite loss or no supervision
        """
        configure_threads(config.threads)
        tracks = load_tracks(_require(Path(tracks_path)))
        run_dir = Path(out_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
        save_tracks(tracks, run_dir / "tracks.rtrk")

        depth_targets = None
        if depth_sidecar is not None:
            depth_targets = load_depth_targets(depth_sidecar, tracks)
        loss_config = LossConfig.from_fit_config(config)
        schedule = FitSchedule.from_fit_config(config)
        layout = ParamLayout(tracks.n_tracks, tracks.n_frames, config.embedding_dim)
        initial = ParamVector.initial(layout, config.seed)

        if config.check_grads:
            coordinates = check_coordinates(layout, config.grad_check_coordinates, config.seed)
            report = self.gradient_check(tracks, initial, config, depth_targets, coordinates)
            if not report.passed:
                raise RigidTrackError(f"gradient check failed, not fitting: {report.summary()}")

        if config.static_mode:
            result = static_mode_fit(tracks, initial, loss_config, schedule, depth_targets)
        else:
            result = pretrained_fit(tracks, initial, loss_config, schedule, depth_targets)
        save_theta(result.theta, run_dir / "theta.npz")
        with open(run_dir / "loss.csv", "w", encoding="utf-8") as handle:
            handle.write("iteration,loss\n")
            for it, value in enumerate(result.history):
                handle.write(f"{it},{value!r}\n")

        forward = forward_pass(tracks, result.theta, loss_config, config.static_mode, depth_targets)
        forward.field.save(run_dir / "field.npz")

        clusters = self._cluster(forward.field, result.theta, tracks, config)
        (run_dir / "clusters.json").write_text(json.dumps(clusters.to_dict()) + "\n",
                                               encoding="utf-8")
        camera_cluster = select_camera_cluster(clusters)
        camera = compose_trajectory(clusters.centroids[camera_cluster])
        export_trajectory_tum([pose.inverse() for pose in camera], run_dir / "camera_tum.txt")

        report = {
            "final_loss": forward.loss,
            "mean_residual_px": forward.mean_residual,
            "iterations": len(result.history),
            "pretrain_iterations": result.pretrain_iterations,
            "skipped_pairs": len(forward.skipped_pairs),
            "smoothed_non_increasing": is_smoothed_non_increasing(result.history),
            "n_clusters": clusters.n_clusters,
            "camera_cluster": camera_cluster,
        }
        (run_dir / "report.txt").write_text(
            "".join(f"{k}={format_value(v)}\n" for k, v in report.items()), encoding="utf-8")

        run = FitRun(run_dir, result, forward, clusters, camera_cluster)
        if export:
            run.artifacts = self.export(run_dir)
        logger.info("Fit finished: loss=%.6e, residual=%.4f px", forward.loss, forward.mean_residual)
        return run

    def _cluster(self, field_: SE3Field, theta: ParamVector, tracks: TrackSet,
                 config: FitConfig) -> MotionClusters:
        depths = np.exp(theta.log_depths)[tracks.visibility]
        median_depth = float(np.median(depths)) if len(depths) else 1.0
        complete = int(field_.valid.all(axis=1).sum())
        if complete == 0:
            raise ClusteringError("too many clusters: no track has a transform on every pair")
        n_clusters = config.n_clusters
        if n_clusters > complete:
            logger.warning("Only %d tracks have a transform on every pair; using %d clusters",
                           complete, complete)
            n_clusters = complete
        return cluster_trajectories(field_, n_clusters, config.seed, median_depth,
                                    tracks=tracks, theta=theta)

    def load_run(self, run_dir: PathLike) -> LoadedRun:
        run_dir = Path(run_dir)
        if not run_dir.is_dir():
            raise ValidationError(f"run directory not found: {run_dir}")
        tracks = load_tracks(_require(run_dir / "tracks.rtrk"))
        theta = load_theta(_require(run_dir / "theta.npz"))
        field_ = SE3Field.load(_require(run_dir / "field.npz"))
        data = json.loads(_require(run_dir / "clusters.json").read_text(encoding="utf-8"))
        return LoadedRun(tracks, theta, field_, MotionClusters.from_dict(data))

    def evaluate(self, run_dir: PathLike, sidecar_path: PathLike) -> EvaluationReport:
        """
        Score a run against a ground-truth sidecar and write metrics.txt and metrics.csv.

        Raises:
            ValidationError: Missing sidecar or run file, or mismatched scene
        """
        sidecar_path = Path(sidecar_path)
        if not sidecar_path.is_file():
            raise ValidationError(f"ground-truth sidecar not found: {sidecar_path}")
        run = self.load_run(run_dir)
        scene = load_scene(Path(run_dir) / "tracks.rtrk", sidecar_path)
        report = evaluate_scene(scene, run.theta, run.field, run.clusters)
        (Path(run_dir) / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
        (Path(run_dir) / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
        return report

    def export(self, run_dir: PathLike,
               grid: Tuple[int, int] = RIGIDITY_GRID) -> List[Path]:
        """Write the point cloud, rigidity maps, feature image and SE(3) components of a run."""
        run_dir = Path(run_dir)
        run = self.load_run(run_dir)
        tracks = run.tracks
        embeddings = run.theta.embeddings
        coords = feature_pca(embeddings)
        camera = extract_camera_trajectory(run.clusters)
        positions = tracks.positions[:, 0]

        paths = [export_pointcloud_ply(tracks, np.exp(run.theta.log_depths),
                                       run_dir / "pointcloud.ply", pca_colors(coords), camera)]
        track_grid = grid_indices(tracks.n_tracks, *grid)
        responses = rigidity_response_grid(embeddings, track_grid)
        for r in range(grid[0]):
            for c in range(grid[1]):
                paths.append(export_rigidity_map_pgm(
                    responses[r, c], positions, tracks.image_size,
                    run_dir / "rigidity_grid" / f"r{r}_c{c}.pgm"))
        paths.append(export_feature_pca_ppm(coords, positions, tracks.image_size,
                                            run_dir / "feature_pca.ppm"))
        paths.append(export_se3_components_csv(run.field, run_dir / "se3_components.csv"))
        logger.info("Exported %d artifacts to %s", len(paths), run_dir)
        return paths
