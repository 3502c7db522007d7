"""SE(3)/SO(3) algebra, pinhole projection and trajectory alignment."""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from core.errors import DegenerateGeometryError, ValidationError

ORTHONORMAL_TOL = 1e-9
_SMALL_ANGLE = 1e-6


class AlignmentMode(Enum):
    """Trajectory alignment model."""
    SE3 = "SE3"
    SIM3 = "Sim3"


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    out.setflags(write=False)
    return out


def check_rotation(matrix: np.ndarray, tol: float = ORTHONORMAL_TOL) -> None:
    """
    Validate the Rotation invariants.

    Raises:
        ValidationError: If the matrix is not 3x3, not orthonormal or has det != +1
    """
    if matrix.shape != (3, 3):
        raise ValidationError(f"rotation must be 3x3, got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValidationError("rotation has non-finite entries")
    if np.max(np.abs(matrix @ matrix.T - np.eye(3))) > tol:
        raise ValidationError("rotation is not orthonormal")
    if abs(np.linalg.det(matrix) - 1.0) > tol:
        raise ValidationError("rotation determinant is not +1")


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model; focal lengths and principal point in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def focal_product(self) -> float:
        return self.fx * self.fy

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the same camera with every pixel coordinate scaled."""
        return Intrinsics(self.fx * factor, self.fy * factor,
                          self.cx * factor, self.cy * factor)

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """Map pixel coordinates (..., 2) to normalized image coordinates."""
        pixels = np.asarray(pixels, dtype=np.float64)
        return np.stack([(pixels[..., 0] - self.cx) / self.fx,
                         (pixels[..., 1] - self.cy) / self.fy], axis=-1)


@dataclass(frozen=True)
class SE3:
    """Rigid transform x -> R x + t."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _frozen(self.rotation)
        translation = _frozen(self.translation).reshape(3)
        check_rotation(rotation)
        if not np.all(np.isfinite(translation)):
            raise ValidationError("translation has non-finite entries")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "SE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "SE3":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "SE3") -> "SE3":
        """Return self ∘ other (other is applied first)."""
        return SE3(self.rotation @ other.rotation,
                   self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "SE3") -> "SE3":
        return self.compose(other)

    def inverse(self) -> "SE3":
        rt = self.rotation.T
        return SE3(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (M, 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera centre when the transform is world-to-camera."""
        return -self.rotation.T @ self.translation

    def allclose(self, other: "SE3", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol))


def project(K: Intrinsics, X: np.ndarray) -> np.ndarray:
    """
    Project a camera-frame point to pixels.

    Raises:
        DegenerateGeometryError: If X.z is not positive
    """
    X = np.asarray(X, dtype=np.float64)
    if not X[2] > 0:
        raise DegenerateGeometryError("behind-camera point")
    return np.array([K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy])


def project_points(K: Intrinsics, points: np.ndarray) -> np.ndarray:
    """Vectorised projection of (..., 3) points; no depth check."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([K.fx * points[..., 0] / z + K.cx,
                     K.fy * points[..., 1] / z + K.cy], axis=-1)


def unproject(K: Intrinsics, p: np.ndarray, d: float) -> np.ndarray:
    """
    Lift a pixel to the camera-frame point at depth d.

    Raises:
        DegenerateGeometryError: If d is not positive
    """
    if not d > 0:
        raise DegenerateGeometryError("non-positive depth")
    p = np.asarray(p, dtype=np.float64)
    return d * np.array([(p[0] - K.cx) / K.fx, (p[1] - K.cy) / K.fy, 1.0])


def unproject_points(K: Intrinsics, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorised unprojection of (..., 2) pixels with (...) depths."""
    rays = np.concatenate([K.normalize(pixels), np.ones(np.shape(pixels)[:-1] + (1,))], axis=-1)
    return rays * np.asarray(depths, dtype=np.float64)[..., None]


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [ω]×."""
    wx, wy, wz = omega
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def _canonical_pi_axis(axis: np.ndarray) -> np.ndarray:
    # at angle π, ω and −ω are the same rotation: first nonzero component positive
    for component in axis:
        if abs(component) > 1e-12:
            return axis if component > 0 else -axis
    return axis


def so3_exp(omega: np.ndarray) -> np.ndarray:
    return ScipyRotation.from_rotvec(np.asarray(omega, dtype=np.float64)).as_matrix()


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Axis-angle vector with norm in [0, π]."""
    omega = ScipyRotation.from_matrix(rotation).as_rotvec()
    angle = np.linalg.norm(omega)
    if math.pi - angle < 1e-9:
        omega = _canonical_pi_axis(omega / angle) * math.pi
    return omega


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    a = (1.0 - math.cos(theta)) / theta ** 2
    b = (theta - math.sin(theta)) / theta ** 3
    return np.eye(3) + a * W + b * W @ W


def _left_jacobian_inverse(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    c = (1.0 - half * math.cos(half) / math.sin(half)) / theta ** 2
    return np.eye(3) - 0.5 * W + c * W @ W


def se3_exp(xi: np.ndarray) -> SE3:
    """Exponential map of the twist ξ = (ω, v)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    omega, v = xi[:3], xi[3:]
    return SE3(so3_exp(omega), _left_jacobian(omega) @ v)


def se3_log(X: SE3) -> np.ndarray:
    """Logarithm map; returns (ω, v) with ‖ω‖ ≤ π."""
    omega = so3_log(X.rotation)
    return np.concatenate([omega, _left_jacobian_inverse(omega) @ X.translation])


@dataclass(frozen=True)
class TrajectoryAlignment:
    """Similarity that maps estimated camera centres onto reference ones."""
    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    @property
    def transform(self) -> SE3:
        return SE3(self.rotation, self.translation)


def umeyama(source: np.ndarray, target: np.ndarray,
            with_scale: bool) -> TrajectoryAlignment:
    """
    Least-squares similarity target ≈ s R source + t.

    Raises:
        DegenerateGeometryError: For coincident or collinear source points
    """
    n = len(source)
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    src = source - mu_s
    tgt = target - mu_t

    spread = np.linalg.svd(src, compute_uv=False)
    if spread[0] < 1e-12 or spread[1] < 1e-9 * spread[0]:
        raise DegenerateGeometryError("degenerate alignment")

    covariance = tgt.T @ src / n
    U, D, Vt = np.linalg.svd(covariance)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    rotation = U @ S @ Vt
    scale = 1.0
    if with_scale:
        variance = (src ** 2).sum() / n
        scale = float(np.trace(np.diag(D) @ S) / variance)
    translation = mu_t - scale * rotation @ mu_s
    return TrajectoryAlignment(rotation, translation, scale)


def align_trajectories(est: Sequence[SE3], ref: Sequence[SE3],
                       mode: AlignmentMode = AlignmentMode.SIM3
                       ) -> Tuple[TrajectoryAlignment, float]:
    """
    Align estimated camera centres onto reference centres and report ATE.

    Both trajectories are world-to-camera poses; only centres are aligned.

    Returns:
        (alignment, ATE-RMSE in reference scene units)
    """
    if len(est) != len(ref):
        raise ValidationError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    if len(est) < 3:
        raise DegenerateGeometryError("underdetermined alignment")
    est_centers = np.array([pose.center for pose in est])
    ref_centers = np.array([pose.center for pose in ref])
    for centers in (est_centers, ref_centers):
        spread = np.linalg.svd(centers - centers.mean(axis=0), compute_uv=False)
        if spread[0] < 1e-12 or spread[1] < 1e-9 * spread[0]:
            raise DegenerateGeometryError("degenerate alignment")

    alignment = umeyama(est_centers, ref_centers, with_scale=mode is AlignmentMode.SIM3)
    residuals = alignment.apply(est_centers) - ref_centers
    ate = float(np.sqrt(np.mean(np.sum(residuals ** 2, axis=1))))
    return alignment, ate
