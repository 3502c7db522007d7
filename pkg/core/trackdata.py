"""Point-track data model, tracks file I/O, synthetic scenes and epipolar masking."""

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch

from core.errors import DegenerateGeometryError, TrackParseError, ValidationError
from core.geometry import SE3, Intrinsics, project_points, se3_exp

logger = logging.getLogger(__name__)

ASCII_MAGIC = "RTRK 1"
BINARY_MAGIC = b"RTRKB1"
_BINARY_HEADER = struct.Struct("<qqqqdddd")

DEFAULT_SAMPSON_THRESHOLD = 2.0
RANSAC_MAX_ITERATIONS = 2000
RANSAC_CONFIDENCE = 0.99

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class TrackSet:
    """
    N point tracks over T frames.

    positions is N×T×2 in pixels; invisible entries hold NaN. visibility is N×T.
    """
    positions: np.ndarray
    visibility: np.ndarray
    intrinsics: Intrinsics
    image_size: Tuple[int, int]

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.float64)
        visibility = np.array(self.visibility, dtype=bool)
        if positions.ndim != 3 or positions.shape[2] != 2:
            raise ValidationError(f"positions must be N×T×2, got {positions.shape}")
        if visibility.shape != positions.shape[:2]:
            raise ValidationError(
                f"visibility shape {visibility.shape} does not match positions {positions.shape[:2]}")
        n_tracks, n_frames = visibility.shape
        if n_tracks < 4:
            raise ValidationError(f"need at least 4 tracks, got {n_tracks}")
        if n_frames < 2:
            raise ValidationError(f"need at least 2 frames, got {n_frames}")

        width, height = (int(v) for v in self.image_size)
        visible = positions[visibility]
        if not np.all(np.isfinite(visible)):
            raise ValidationError("visible track position is not finite")
        inside = ((visible[:, 0] >= 0) & (visible[:, 0] < width)
                  & (visible[:, 1] >= 0) & (visible[:, 1] < height))
        if not np.all(inside):
            track, frame = np.argwhere(visibility)[np.argmin(inside)]
            raise ValidationError(
                f"visible point of track {track} at frame {frame} lies outside the "
                f"{width}x{height} image")
        positions[~visibility] = np.nan
        positions.setflags(write=False)
        visibility.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "visibility", visibility)
        object.__setattr__(self, "image_size", (width, height))

    @property
    def n_tracks(self) -> int:
        return self.positions.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    def joint_visibility(self, t: int) -> np.ndarray:
        """Tracks visible in both frames t and t+1."""
        return self.visibility[:, t] & self.visibility[:, t + 1]

    def fingerprint(self) -> int:
        """
        Stable 63-bit hash of the track data, used to seed RANSAC.

        Hashes normalized camera coordinates, so rescaling the pixel grid by a
        power of two leaves the seed unchanged.
        """
        digest = hashlib.sha256()
        normalized = self.intrinsics.normalize(self.positions)
        digest.update(np.nan_to_num(normalized, nan=-1.0).tobytes())
        digest.update(self.visibility.tobytes())
        return int.from_bytes(digest.digest()[:8], "little") >> 1

    def scaled(self, factor: float) -> "TrackSet":
        """The same tracks observed by a camera with every pixel scaled."""
        width, height = self.image_size
        return TrackSet(self.positions * factor, self.visibility,
                        self.intrinsics.scaled(factor),
                        (int(math.ceil(width * factor)), int(math.ceil(height * factor))))


def _parse_fields(line: str, count: int, line_number: int, path: str) -> List[str]:
    fields = line.split()
    if len(fields) != count:
        raise TrackParseError(f"expected {count} fields, got {len(fields)}", line_number, path)
    return fields


def load_tracks(path: PathLike) -> TrackSet:
    """
    Load a tracks file (ASCII `RTRK 1` or binary `RTRKB1`).

    Raises:
        TrackParseError: Malformed header or rows, with the offending line number
        ValidationError: Parsed data breaks a TrackSet invariant
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(BINARY_MAGIC):
        return _load_binary(raw, str(path))

    name = str(path)
    try:
        lines = raw.decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise TrackParseError(f"non-ASCII byte 0x{raw[e.start]:02x}",
                              raw.count(b"\n", 0, e.start) + 1, name) from e
    if not lines or lines[0].strip() != ASCII_MAGIC:
        raise TrackParseError(f"missing '{ASCII_MAGIC}' header", 1, name)
    if len(lines) < 2:
        raise TrackParseError("missing size header", 2, name)
    header = _parse_fields(lines[1], 8, 2, name)
    try:
        n_tracks, n_frames, width, height = (int(v) for v in header[:4])
        fx, fy, cx, cy = (float(v) for v in header[4:])
    except ValueError as e:
        raise TrackParseError(f"bad size header: {e}", 2, name) from e
    if n_tracks < 0 or n_frames < 0:
        raise TrackParseError("negative track or frame count", 2, name)

    positions = np.full((n_tracks, n_frames, 2), np.nan)
    visibility = np.zeros((n_tracks, n_frames), dtype=bool)
    seen = np.zeros((n_tracks, n_frames), dtype=bool)
    rows = [(number, line) for number, line in enumerate(lines[2:], start=3) if line.strip()]
    expected = n_tracks * n_frames
    if len(rows) > expected:
        raise TrackParseError(
            f"row count exceeds declared N*T = {expected}", rows[expected][0], name)
    if len(rows) < expected:
        last = rows[-1][0] if rows else 2
        raise TrackParseError(
            f"expected {expected} rows for N={n_tracks}, T={n_frames}, found {len(rows)}",
            last + 1, name)

    for number, line in rows:
        fields = _parse_fields(line, 5, number, name)
        try:
            i, t = int(fields[0]), int(fields[1])
            x, y = float(fields[2]), float(fields[3])
            v = int(fields[4])
        except ValueError as e:
            raise TrackParseError(f"bad row: {e}", number, name) from e
        if not (0 <= i < n_tracks and 0 <= t < n_frames):
            raise TrackParseError(f"row index ({i}, {t}) out of range", number, name)
        if v not in (0, 1):
            raise TrackParseError(f"visibility must be 0 or 1, got {v}", number, name)
        if seen[i, t]:
            raise TrackParseError(f"duplicate row for ({i}, {t})", number, name)
        seen[i, t] = True
        positions[i, t] = (x, y)
        visibility[i, t] = bool(v)

    return TrackSet(positions, visibility, Intrinsics(fx, fy, cx, cy), (width, height))


def _load_binary(raw: bytes, name: str) -> TrackSet:
    offset = len(BINARY_MAGIC)
    if len(raw) < offset + _BINARY_HEADER.size:
        raise TrackParseError("truncated binary header", 1, name)
    n_tracks, n_frames, width, height, fx, fy, cx, cy = _BINARY_HEADER.unpack_from(raw, offset)
    offset += _BINARY_HEADER.size
    count = n_tracks * n_frames
    expected = offset + count * 2 * 4 + count
    if n_tracks < 0 or n_frames < 0 or len(raw) != expected:
        raise TrackParseError(
            f"binary payload is {len(raw)} bytes, expected {expected}", 1, name)
    positions = np.frombuffer(raw, dtype="<f4", count=count * 2, offset=offset)
    offset += count * 2 * 4
    visibility = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)
    return TrackSet(positions.astype(np.float64).reshape(n_tracks, n_frames, 2),
                    visibility.reshape(n_tracks, n_frames).astype(bool),
                    Intrinsics(fx, fy, cx, cy), (width, height))


def save_tracks(tracks: TrackSet, path: PathLike, binary: bool = False) -> Path:
    """Write tracks in the ASCII format, or the binary variant."""
    path = Path(path)
    K = tracks.intrinsics
    width, height = tracks.image_size
    if binary:
        header = _BINARY_HEADER.pack(tracks.n_tracks, tracks.n_frames, width, height,
                                     K.fx, K.fy, K.cx, K.cy)
        payload = (BINARY_MAGIC + header
                   + tracks.positions.astype("<f4").tobytes()
                   + tracks.visibility.astype(np.uint8).tobytes())
        path.write_bytes(payload)
        return path

    lines = [ASCII_MAGIC,
             f"{tracks.n_tracks} {tracks.n_frames} {width} {height} "
             f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}"]
    for i in range(tracks.n_tracks):
        for t in range(tracks.n_frames):
            if tracks.visibility[i, t]:
                x, y = tracks.positions[i, t]
                lines.append(f"{i} {t} {float(x)!r} {float(y)!r} 1")
            else:
                lines.append(f"{i} {t} nan nan 0")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


# Synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic multi-rigid-body scene."""
    n_bodies: int = 2
    tracks_per_body: int = 64
    n_static_tracks: int = 128
    n_frames: int = 10
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(256.0, 256.0, 160.0, 120.0))
    image_size: Tuple[int, int] = (320, 240)
    motion_magnitude: float = 0.1
    body_speed: float = 2.0
    pixel_noise_sigma: float = 0.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.n_bodies < 0:
            raise ValidationError(f"n_bodies must be non-negative, got {self.n_bodies}")
        if self.tracks_per_body < 4:
            raise ValidationError(f"tracks_per_body must be >= 4, got {self.tracks_per_body}")
        if self.n_static_tracks < 8:
            raise ValidationError(f"n_static_tracks must be >= 8, got {self.n_static_tracks}")
        if self.n_frames < 2:
            raise ValidationError(f"T must be >= 2, got {self.n_frames}")
        if self.motion_magnitude < 0 or self.pixel_noise_sigma < 0 or self.body_speed < 0:
            raise ValidationError("motion_magnitude, body_speed and pixel_noise_sigma must be >= 0")

    @property
    def n_tracks(self) -> int:
        return self.n_static_tracks + self.n_bodies * self.tracks_per_body

    def to_dict(self) -> dict:
        data = asdict(self)
        data["image_size"] = list(self.image_size)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        data["intrinsics"] = Intrinsics(**data["intrinsics"])
        data["image_size"] = tuple(data["image_size"])
        return cls(**data)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """Ground-truth oracle scene; body 0 is the static background."""
    spec: SceneSpec
    tracks: TrackSet
    body_of_track: np.ndarray
    body_trajectories: List[List[SE3]]
    camera_trajectory: List[SE3]
    gt_depths: np.ndarray
    world_points: np.ndarray

    @property
    def n_bodies(self) -> int:
        return len(self.body_trajectories) - 1

    def body_motion(self, body: int, t: int) -> SE3:
        return self.body_trajectories[body][t]

    def points_in_camera(self, t: int) -> np.ndarray:
        """Camera-frame position of every track's point at frame t."""
        out = np.empty((len(self.body_of_track), 3))
        for body, motions in enumerate(self.body_trajectories):
            members = self.body_of_track == body
            moved = motions[t].apply(self.world_points[members])
            out[members] = self.camera_trajectory[t].apply(moved)
        return out

    def reproject(self) -> np.ndarray:
        """Noise-free pixel positions N×T×2 from the generating transforms."""
        K = self.tracks.intrinsics
        return np.stack([project_points(K, self.points_in_camera(t))
                         for t in range(self.tracks.n_frames)], axis=1)

    def relative_motion(self, body: int, t: int) -> SE3:
        """Camera-t to camera-(t+1) motion of a point of the given body."""
        w2c = self.camera_trajectory
        motion = self.body_trajectories[body]
        return w2c[t + 1] @ motion[t + 1] @ motion[t].inverse() @ w2c[t].inverse()

    def gt_log_depths(self) -> np.ndarray:
        return np.where(self.tracks.visibility, np.log(np.abs(self.gt_depths)), 0.0)


def _smooth_twists(rng: np.random.Generator, n_steps: int, rotation_scale: float,
                   translation_scale: float) -> np.ndarray:
    raw = rng.standard_normal((n_steps, 6))
    padded = np.concatenate([raw[:1], raw, raw[-1:]], axis=0)
    smooth = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
    smooth[:, :3] *= rotation_scale
    smooth[:, 3:] *= translation_scale
    return smooth


def _integrate(twists: np.ndarray) -> List[SE3]:
    poses = [SE3.identity()]
    for xi in twists:
        poses.append(poses[-1] @ se3_exp(xi))
    return poses


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """
    Build a deterministic synthetic scene from a spec.

    Static points sit at depth 4..8 in front of the first camera; each body is a
    rigid cube of points around a centre at depth 3..5, moved about that centre
    by its own smooth, rotation-dominated trajectory.
    """
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    K = spec.intrinsics
    width, height = spec.image_size
    n_frames = spec.n_frames

    camera_c2w = _integrate(_smooth_twists(rng, n_frames - 1, 0.2 * spec.motion_magnitude,
                                           spec.motion_magnitude))
    camera_trajectory = [pose.inverse() for pose in camera_c2w]

    def sample_pixels(count: int, margin: float) -> np.ndarray:
        return np.stack([rng.uniform(margin * width, (1 - margin) * width, count),
                         rng.uniform(margin * height, (1 - margin) * height, count)], axis=1)

    def lift(pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        rays = np.concatenate([K.normalize(pixels), np.ones((len(pixels), 1))], axis=1)
        return rays * depths[:, None]

    static_points = lift(sample_pixels(spec.n_static_tracks, 0.05),
                         rng.uniform(4.0, 8.0, spec.n_static_tracks))
    points = [static_points]
    labels = [np.zeros(spec.n_static_tracks, dtype=int)]
    body_trajectories = [[SE3.identity() for _ in range(n_frames)]]

    for body in range(1, spec.n_bodies + 1):
        center = lift(sample_pixels(1, 0.3), rng.uniform(3.0, 5.0, 1))[0]
        cube = rng.uniform(-0.5, 0.5, (spec.tracks_per_body, 3))
        points.append(center + cube)
        labels.append(np.full(spec.tracks_per_body, body, dtype=int))
        speed = spec.body_speed * spec.motion_magnitude
        local = _integrate(_smooth_twists(rng, n_frames - 1, 2.0 * speed, speed))
        to_center = SE3(np.eye(3), center)
        body_trajectories.append([to_center @ pose @ to_center.inverse() for pose in local])

    world_points = np.concatenate(points, axis=0)
    body_of_track = np.concatenate(labels)
    n_tracks = len(world_points)

    depths = np.empty((n_tracks, n_frames))
    clean = np.empty((n_tracks, n_frames, 2))
    for t in range(n_frames):
        camera_points = np.empty((n_tracks, 3))
        for body, motions in enumerate(body_trajectories):
            members = body_of_track == body
            camera_points[members] = camera_trajectory[t].apply(motions[t].apply(world_points[members]))
        depths[:, t] = camera_points[:, 2]
        safe = np.where(camera_points[:, 2:3] > 1e-3, camera_points, np.array([0.0, 0.0, 1.0]))
        clean[:, t] = project_points(K, safe)

    positions = clean + spec.pixel_noise_sigma * rng.standard_normal(clean.shape)
    visibility = ((depths > 0.1)
                  & (positions[..., 0] >= 0) & (positions[..., 0] < width)
                  & (positions[..., 1] >= 0) & (positions[..., 1] < height))
    tracks = TrackSet(np.where(visibility[..., None], positions, np.nan), visibility, K,
                      spec.image_size)
    logger.debug("Generated scene: %d tracks, %d frames, %.1f%% visible", n_tracks, n_frames,
                 100.0 * visibility.mean())
    return SyntheticScene(spec, tracks, body_of_track, body_trajectories, camera_trajectory,
                          depths, world_points)


def save_scene(scene: SyntheticScene, out_dir: PathLike) -> Tuple[Path, Path]:
    """Write `tracks.rtrk` and the deterministic `gt.json` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tracks_path = save_tracks(scene.tracks, out_dir / "tracks.rtrk")
    sidecar = {
        "spec": scene.spec.to_dict(),
        "body_of_track": scene.body_of_track.tolist(),
        "gt_depths": scene.gt_depths.tolist(),
        "world_points": scene.world_points.tolist(),
        "camera_trajectory": [pose.matrix.tolist() for pose in scene.camera_trajectory],
        "body_trajectories": [[pose.matrix.tolist() for pose in motions]
                              for motions in scene.body_trajectories],
    }
    sidecar_path = out_dir / "gt.json"
    sidecar_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return tracks_path, sidecar_path


def load_scene(tracks_path: PathLike, sidecar_path: PathLike) -> SyntheticScene:
    """Rebuild a SyntheticScene from a tracks file and its ground-truth sidecar."""
    tracks = load_tracks(tracks_path)
    data = json.loads(Path(sidecar_path).read_text(encoding="utf-8"))
    body_of_track = np.array(data["body_of_track"], dtype=int)
    if len(body_of_track) != tracks.n_tracks:
        raise ValidationError(
            f"sidecar has {len(body_of_track)} labels for {tracks.n_tracks} tracks")
    return SyntheticScene(
        spec=SceneSpec.from_dict(data["spec"]),
        tracks=tracks,
        body_of_track=body_of_track,
        body_trajectories=[[SE3.from_matrix(np.array(m)) for m in motions]
                           for motions in data["body_trajectories"]],
        camera_trajectory=[SE3.from_matrix(np.array(m)) for m in data["camera_trajectory"]],
        gt_depths=np.array(data["gt_depths"], dtype=np.float64),
        world_points=np.array(data["world_points"], dtype=np.float64),
    )


# Epipolar static masking


def _hartley_normalize(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    centroid = points.mean(axis=0)
    mean_distance = np.mean(np.linalg.norm(points - centroid, axis=1))
    scale = math.sqrt(2.0) / (mean_distance + 1e-12)
    T = np.array([[scale, 0.0, -scale * centroid[0]],
                  [0.0, scale, -scale * centroid[1]],
                  [0.0, 0.0, 1.0]])
    homogeneous = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    return homogeneous @ T.T, T


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Normalized 8-point estimate of F with x2ᵀ F x1 = 0, rank 2 enforced."""
    h1, T1 = _hartley_normalize(x1)
    h2, T2 = _hartley_normalize(x2)
    A = np.einsum("ni,nj->nij", h2, h1).reshape(len(h1), 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    S[2] = 0.0
    F = T2.T @ (U @ np.diag(S) @ Vt) @ T1
    return F / np.linalg.norm(F)


def sampson_distance(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """First-order geometric error of correspondences x1 -> x2 (same units as x², squared)."""
    h1 = np.concatenate([x1, np.ones((len(x1), 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((len(x2), 1))], axis=1)
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    numerator = np.einsum("ni,ni->n", h2, Fx1) ** 2
    denominator = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return numerator / np.maximum(denominator, 1e-300)


def sampson_static_mask(tracks: TrackSet, frame_pair: Tuple[int, int],
                        threshold: float = DEFAULT_SAMPSON_THRESHOLD) -> np.ndarray:
    """
    Flag tracks whose motion over a frame pair fits the RANSAC epipolar consensus.

    Correspondences are taken in normalized camera coordinates; the Sampson
    distance is converted to px² with fx·fy before thresholding.

    Returns:
        N booleans, true for tracks marked static
    """
    t0, t1 = frame_pair
    if t1 != t0 + 1 or not (0 <= t0 and t1 < tracks.n_frames):
        raise ValidationError(f"frame pair must be (t, t+1) inside the sequence, got {frame_pair}")
    joint = tracks.joint_visibility(t0)
    index = np.flatnonzero(joint)
    if len(index) < 8:
        raise DegenerateGeometryError("underdetermined epipolar fit")

    K = tracks.intrinsics
    x1 = K.normalize(tracks.positions[index, t0])
    x2 = K.normalize(tracks.positions[index, t1])
    to_pixels = K.focal_product
    rng = np.random.default_rng(tracks.fingerprint() + t0)

    best_inliers = np.zeros(len(index), dtype=bool)
    required = RANSAC_MAX_ITERATIONS
    iteration = 0
    while iteration < min(required, RANSAC_MAX_ITERATIONS):
        iteration += 1
        sample = rng.choice(len(index), size=8, replace=False)
        F = eight_point(x1[sample], x2[sample])
        inliers = sampson_distance(F, x1, x2) * to_pixels < threshold
        if inliers.sum() > best_inliers.sum():
            best_inliers = inliers
            ratio = inliers.mean()
            if ratio >= 1.0:
                required = 0
            else:
                miss = np.log1p(-ratio ** 8)
                if miss < 0:
                    required = math.ceil(math.log(1.0 - RANSAC_CONFIDENCE) / miss)
    logger.debug("RANSAC on pair %s: %d iterations, %d/%d inliers",
                 frame_pair, iteration, best_inliers.sum(), len(index))

    mask = np.zeros(tracks.n_tracks, dtype=bool)
    if best_inliers.sum() >= 8:
        F = eight_point(x1[best_inliers], x2[best_inliers])
        mask[index] = sampson_distance(F, x1, x2) * to_pixels < threshold
    return mask


def merge_static_override(R_soft: torch.Tensor, static_mask, query_static=True) -> torch.Tensor:
    """
    Force rigidity to one on statically masked tracks when the query is static too.

    Broadcasts: R_soft may be a single N-vector (with a scalar query flag) or a
    B×N block of rows (with a B-vector of query flags).
    """
    R_soft = torch.as_tensor(R_soft)
    static_mask = torch.as_tensor(static_mask, dtype=torch.bool)
    query_static = torch.as_tensor(query_static, dtype=torch.bool)
    if R_soft.dim() == 2 and query_static.dim() == 1:
        query_static = query_static[:, None]
    override = static_mask & query_static
    return torch.where(override, torch.ones_like(R_soft), R_soft)
