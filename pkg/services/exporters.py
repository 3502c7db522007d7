"""File artifacts: point clouds, rigidity maps, feature images and trajectories."""

import csv
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement
from scipy.spatial.transform import Rotation

from core.errors import RigidTrackError, ValidationError
from core.geometry import SE3, unproject_points
from core.trackdata import TrackSet
from services.optimizer import SE3Field

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SPLAT_RADIUS = 1
DEFAULT_COLOR = (200, 200, 200)


def _write_failed(path: Path, error: OSError) -> RigidTrackError:
    return RigidTrackError(f"cannot write {path}: {error.strerror or error}")


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise _write_failed(path, e) from e
    return path


def export_pointcloud_ply(tracks: TrackSet, depths: np.ndarray, path: PathLike,
                          colors: Optional[np.ndarray] = None,
                          trajectory: Optional[Sequence[SE3]] = None,
                          reference_frame: int = 0) -> Path:
    """
    Write every visible track observation as one vertex of an ASCII PLY.

    Args:
        tracks: Point tracks
        depths: N×T positive depths (exp of the fitted log-depths, or ground truth)
        path: Output file
        colors: Optional N×3 uint8 per-track colours
        trajectory: World-to-camera poses; points are moved into the
            reference frame's camera coordinates when given, otherwise each
            stays in its own frame's camera coordinates
        reference_frame: Frame whose camera coordinates the cloud is expressed in

    Returns:
        The written path
    """
    depths = np.asarray(depths, dtype=np.float64)
    if depths.shape != tracks.visibility.shape:
        raise ValidationError(f"depths have shape {depths.shape}, expected {tracks.visibility.shape}")
    visible = tracks.visibility
    if np.any(~(depths[visible] > 0)):
        raise ValidationError("exported depths must be positive")
    if colors is None:
        colors = np.tile(np.array(DEFAULT_COLOR, dtype=np.uint8), (tracks.n_tracks, 1))
    colors = np.asarray(colors, dtype=np.uint8)
    if trajectory is not None and len(trajectory) != tracks.n_frames:
        raise ValidationError(f"trajectory has {len(trajectory)} poses for {tracks.n_frames} frames")

    chunks = []
    for t in range(tracks.n_frames):
        index = np.flatnonzero(visible[:, t])
        points = unproject_points(tracks.intrinsics, tracks.positions[index, t], depths[index, t])
        if trajectory is not None:
            to_reference = trajectory[reference_frame] @ trajectory[t].inverse()
            points = to_reference.apply(points)
        vertex = np.empty(len(index), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8"),
                                             ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                                             ("frame", "i4")])
        vertex["x"], vertex["y"], vertex["z"] = points[:, 0], points[:, 1], points[:, 2]
        vertex["red"], vertex["green"], vertex["blue"] = colors[index].T
        vertex["frame"] = t
        chunks.append(vertex)

    path = _prepare(path)
    element = PlyElement.describe(np.concatenate(chunks), "vertex")
    try:
        PlyData([element], text=True).write(str(path))
    except OSError as e:
        raise _write_failed(path, e) from e
    logger.debug("Wrote %d vertices to %s", element.count, path)
    return path


def read_pointcloud_ply(path: PathLike) -> np.ndarray:
    """Vertex records (x, y, z, red, green, blue, frame) of a PLY written by export_pointcloud_ply."""
    return PlyData.read(str(path))["vertex"].data


def splat_image(values: np.ndarray, pixels: np.ndarray, image_size: Tuple[int, int]) -> np.ndarray:
    """Paint a 3×3 patch per point; later points overwrite earlier ones."""
    width, height = image_size
    values = np.asarray(values)
    image = np.zeros((height, width) + values.shape[1:], dtype=np.uint8)
    for value, (x, y) in zip(values, np.asarray(pixels, dtype=np.float64)):
        if not (np.isfinite(x) and np.isfinite(y)):
            continue
        col, row = int(round(x)), int(round(y))
        image[max(row - SPLAT_RADIUS, 0):row + SPLAT_RADIUS + 1,
              max(col - SPLAT_RADIUS, 0):col + SPLAT_RADIUS + 1] = value
    return image


def export_rigidity_map_pgm(mask: np.ndarray, track_positions: np.ndarray,
                            image_size: Tuple[int, int], path: PathLike) -> Path:
    """
    Write a binary 8-bit PGM of rigidity weights splatted at the track pixels.

    Args:
        mask: N weights in [0, 1]
        track_positions: N×2 pixel positions (NaN rows are skipped)
        image_size: (width, height)
        path: Output file
    """
    mask = np.asarray(mask, dtype=np.float64)
    if np.any(mask < 0) or np.any(mask > 1):
        raise ValidationError("rigidity weights must lie in [0, 1]")
    levels = np.round(255.0 * mask).astype(np.uint8)
    image = splat_image(levels, track_positions, image_size)
    path = _prepare(path)
    try:
        Image.fromarray(image).save(path, format="PPM")
    except OSError as e:
        raise _write_failed(path, e) from e
    return path


def export_feature_pca_ppm(coords: np.ndarray, track_positions: np.ndarray,
                           image_size: Tuple[int, int], path: PathLike) -> Path:
    """
    Write a binary PPM colouring each track by its top-3 PCA embedding coordinates.

    Each component is min-max scaled to 0..255 over the tracks.
    """
    image = splat_image(pca_colors(coords), track_positions, image_size)
    path = _prepare(path)
    try:
        Image.fromarray(image).save(path, format="PPM")
    except OSError as e:
        raise _write_failed(path, e) from e
    return path


def pca_colors(coords: np.ndarray) -> np.ndarray:
    """N×3 uint8 colours from PCA coordinates, min-max scaled per component."""
    coords = np.asarray(coords, dtype=np.float64)
    low, high = coords.min(axis=0), coords.max(axis=0)
    span = np.where(high > low, high - low, 1.0)
    return np.round(255.0 * (coords - low) / span).astype(np.uint8)


def export_trajectory_tum(trajectory: Sequence[SE3], path: PathLike,
                          timestamps: Optional[Sequence[float]] = None) -> Path:
    """
    Write poses as TUM lines `timestamp tx ty tz qx qy qz qw`.

    Poses are written as given; pass camera-to-world poses for standard
    trajectory tooling. Quaternions are Hamilton, scalar last, with qw ≥ 0.
    """
    timestamps = range(len(trajectory)) if timestamps is None else timestamps
    lines = []
    for stamp, pose in zip(timestamps, trajectory):
        quat = Rotation.from_matrix(pose.rotation).as_quat()
        if quat[3] < 0:
            quat = -quat
        values = np.concatenate([[float(stamp)], pose.translation, quat]) + 0.0
        lines.append(" ".join(f"{v:.17g}" for v in values))
    path = _prepare(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise _write_failed(path, e) from e
    return path


def load_trajectory_tum(path: PathLike) -> Tuple[np.ndarray, List[SE3]]:
    """
    Read the poses of a TUM trajectory file.

    Returns:
        (timestamps, poses)
    """
    stamps, poses = [], []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ValidationError(f"{path}:{number}: expected 8 fields, got {len(fields)}")
        values = [float(v) for v in fields]
        rotation = Rotation.from_quat(values[4:8]).as_matrix()
        stamps.append(values[0])
        poses.append(SE3(rotation, np.array(values[1:4])))
    return np.array(stamps), poses


def export_se3_components_csv(field: SE3Field, path: PathLike) -> Path:
    """
    Write one row per solved (track, frame pair): translation and XYZ Euler
    angles in radians. Unsupervised entries are left out.
    """
    path = _prepare(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["track", "pair", "tx", "ty", "tz", "rx", "ry", "rz"])
            for i, t in np.argwhere(field.valid):
                euler = Rotation.from_matrix(field.rotations[i, t]).as_euler("xyz")
                values = np.concatenate([field.translations[i, t], euler])
                writer.writerow([int(i), int(t)] + [f"{v:.9g}" for v in values])
    except OSError as e:
        raise _write_failed(path, e) from e
    return path
