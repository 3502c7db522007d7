"""Scene loss assembly and per-scene first-order fitting."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from core.config import FitConfig
from core.errors import (DegenerateGeometryError, NonFiniteError, SupervisionError,
                         ValidationError)
from core.geometry import SE3, se3_log
from core.gradients import ParamLayout, ParamVector, evaluate
from core.procrustes import WEIGHT_FLOOR, weighted_procrustes
from core.rigidity import rigidity_matrix
from core.trackdata import DEFAULT_SAMPSON_THRESHOLD, TrackSet, merge_static_override, sampson_static_mask

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
MOVING_AVERAGE_WINDOW = 50


@dataclass(frozen=True)
class LossConfig:
    """Loss-shaping switches of a fit."""
    lambda_depth: float = 0.0
    robust_delta: float = 4.0
    use_static_override: bool = False
    sampson_threshold: float = DEFAULT_SAMPSON_THRESHOLD

    def __post_init__(self):
        if self.lambda_depth < 0:
            raise ValidationError(f"lambda_depth must be >= 0, got {self.lambda_depth}")
        if not self.robust_delta > 0:
            raise ValidationError(f"robust_delta must be > 0, got {self.robust_delta}")
        if self.sampson_threshold <= 0:
            raise ValidationError(f"sampson_threshold must be > 0, got {self.sampson_threshold}")

    @classmethod
    def from_fit_config(cls, config: FitConfig) -> "LossConfig":
        return cls(config.lambda_depth, config.robust_delta,
                   config.use_static_override, config.sampson_threshold)


@dataclass(frozen=True)
class FitSchedule:
    """Adam schedule of a fit."""
    lr: float = 1e-2
    iterations: int = 5000
    seed: int = 0
    pretrain_iterations: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    log_every: int = 100
    # cosine decay of the learning rate down to lr * final_lr_scale
    final_lr_scale: float = 1e-2

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.final_lr_scale <= 1:
            raise ValidationError(f"final_lr_scale must be in (0, 1], got {self.final_lr_scale}")
        if self.iterations < 0 or self.pretrain_iterations < 0:
            raise ValidationError("iteration counts must be >= 0")

    @classmethod
    def from_fit_config(cls, config: FitConfig) -> "FitSchedule":
        return cls(lr=config.lr, iterations=config.iterations, seed=config.seed,
                   pretrain_iterations=config.pretrain_iterations)


@dataclass(frozen=True, eq=False)
class SE3Field:
    """
    Per-track, per-frame-pair transforms mapping camera-t to camera-(t+1) coordinates.

    Entries whose track was not supervised on a pair are invalid: identity
    rotation, zero translation and a NaN residual.
    """
    rotations: np.ndarray
    translations: np.ndarray
    valid: np.ndarray
    residuals: np.ndarray

    @property
    def n_tracks(self) -> int:
        return self.valid.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.valid.shape[1]

    def get(self, i: int, t: int) -> SE3:
        if not self.valid[i, t]:
            raise ValidationError(f"track {i} has no transform on frame pair {t}")
        return SE3(self.rotations[i, t], self.translations[i, t])

    def log_features(self) -> np.ndarray:
        """N×(T−1)×6 se3_log coordinates, NaN where invalid."""
        out = np.full((self.n_tracks, self.n_pairs, 6), np.nan)
        for i, t in np.argwhere(self.valid):
            out[i, t] = se3_log(SE3(self.rotations[i, t], self.translations[i, t]))
        return out

    def save(self, path) -> None:
        np.savez(path, rotations=self.rotations, translations=self.translations,
                 valid=self.valid, residuals=self.residuals)

    @classmethod
    def load(cls, path) -> "SE3Field":
        with np.load(path) as data:
            return cls(data["rotations"], data["translations"], data["valid"].astype(bool),
                       data["residuals"])


@dataclass
class ForwardResult:
    loss: float
    field: SE3Field
    per_track_residuals: np.ndarray
    skipped_pairs: List[int] = field(default_factory=list)

    @property
    def mean_residual(self) -> float:
        supervised = self.per_track_residuals[np.isfinite(self.per_track_residuals)]
        return float(supervised.mean()) if len(supervised) else math.nan


@dataclass
class _PairTerms:
    rows: torch.Tensor
    rotations: torch.Tensor
    translations: torch.Tensor
    sq_residuals: torch.Tensor


def robust_loss(sq_norm: torch.Tensor, delta: float) -> torch.Tensor:
    """Huber loss of a residual norm, taken from its square so zero residuals stay differentiable."""
    if math.isinf(delta):
        return 0.5 * sq_norm
    norm = torch.sqrt(sq_norm.clamp_min(delta * delta))
    return torch.where(sq_norm <= delta * delta, 0.5 * sq_norm, delta * (norm - 0.5 * delta))


class SceneObjective:
    """
    The scene loss as a function of the flat parameter tensor.

    For every frame pair, all tracks visible in both frames are unprojected
    with their depths; each such track solves one weighted Procrustes problem
    over that shared point set, with its rigidity row times the confidences as
    weights, and is reprojected into frame t+1.
    """

    def __init__(self, tracks: TrackSet, config: LossConfig, layout: ParamLayout,
                 static_mode: bool = False, depth_targets: Optional[np.ndarray] = None):
        if (layout.n_tracks, layout.n_frames) != (tracks.n_tracks, tracks.n_frames):
            raise ValidationError(
                f"parameter layout is {layout.n_tracks}×{layout.n_frames}, "
                f"tracks are {tracks.n_tracks}×{tracks.n_frames}")
        self.tracks = tracks
        self.config = config
        self.layout = layout
        self.static_mode = static_mode

        K = tracks.intrinsics
        self._focal = torch.tensor([K.fx, K.fy], dtype=torch.float64)
        self._centre = torch.tensor([K.cx, K.cy], dtype=torch.float64)
        pixels = np.nan_to_num(tracks.positions, nan=0.0)
        self._pixels = torch.from_numpy(pixels)
        normalized = K.normalize(pixels.reshape(-1, 2)).reshape(pixels.shape)
        self._rays = torch.from_numpy(
            np.concatenate([normalized, np.ones(pixels.shape[:2] + (1,))], axis=-1))

        self._pairs: List[Optional[torch.Tensor]] = []
        self._static: List[Optional[torch.Tensor]] = []
        self.skipped_pairs: List[int] = []
        for t in range(tracks.n_frames - 1):
            index = np.flatnonzero(tracks.joint_visibility(t))
            if len(index) < 3:
                logger.warning("Skipping frame pair %d: %d joint-visible tracks", t, len(index))
                self.skipped_pairs.append(t)
                self._pairs.append(None)
                self._static.append(None)
                continue
            self._pairs.append(torch.from_numpy(index))
            self._static.append(self._static_rows(t, index))

        self._depth_targets = None
        if depth_targets is not None:
            targets = np.asarray(depth_targets, dtype=np.float64)
            if targets.shape != tracks.visibility.shape:
                raise ValidationError(
                    f"depth targets have shape {targets.shape}, expected {tracks.visibility.shape}")
            usable = tracks.visibility & np.isfinite(targets) & (targets > 0)
            self._depth_targets = (torch.from_numpy(np.where(usable, targets, 1.0)),
                                   torch.from_numpy(usable))

    def _static_rows(self, t: int, index: np.ndarray) -> Optional[torch.Tensor]:
        if not self.config.use_static_override or self.static_mode:
            return None
        try:
            mask = sampson_static_mask(self.tracks, (t, t + 1), self.config.sampson_threshold)
        except DegenerateGeometryError as e:
            logger.warning("No static override on frame pair %d: %s", t, e)
            return None
        return torch.from_numpy(mask[index])

    def _project(self, points: torch.Tensor) -> torch.Tensor:
        z = points[:, 2:].clamp_min(MIN_DEPTH)
        return self._focal * points[:, :2] / z + self._centre

    def pair_terms(self, values: torch.Tensor) -> Dict[int, _PairTerms]:
        """Solved transforms and squared reprojection errors of every supervised pair."""
        blocks = self.layout.split(values)
        depths = torch.exp(blocks["log_depths"])
        confidences = torch.sigmoid(blocks["confidence_logits"])
        rigidity = None if self.static_mode else rigidity_matrix(blocks["embeddings"])

        terms = {}
        for t, index in enumerate(self._pairs):
            if index is None:
                continue
            source = self._rays[index, t] * depths[index, t, None]
            target = self._rays[index, t + 1] * depths[index, t + 1, None]
            if rigidity is None:
                weights = torch.ones(len(index), len(index), dtype=values.dtype)
            else:
                weights = rigidity[index][:, index]
            static = self._static[t]
            if static is not None:
                weights = merge_static_override(weights, static, static)
            weights = weights * confidences[index, t][None, :]

            supervised = (weights > WEIGHT_FLOOR).sum(-1) >= 3
            if not bool(supervised.any()):
                continue
            rows = torch.nonzero(supervised).flatten()
            R, trans = weighted_procrustes(source, target, weights[rows])
            moved = (R @ source[rows].unsqueeze(-1)).squeeze(-1) + trans
            diff = self._project(moved) - self._pixels[index[rows], t + 1]
            terms[t] = _PairTerms(index[rows], R, trans, (diff ** 2).sum(-1))
        return terms

    def depth_term(self, values: torch.Tensor) -> torch.Tensor:
        """
        Scale-aligned squared depth error, relative to the median target.

        One closed-form scale covers the whole scene, so the depth scale of
        every frame is tied to the same gauge as depth_error scores it.
        """
        targets, usable = self._depth_targets
        if not bool(usable.any()):
            return torch.zeros((), dtype=values.dtype)
        depths = torch.exp(self.layout.split(values)["log_depths"])
        predicted, target = depths[usable], targets[usable]
        alpha = (predicted * target).sum() / (predicted * predicted).sum()
        return (((alpha * predicted - target) / target.median()) ** 2).mean()

    def loss_from_terms(self, values: torch.Tensor, terms: Dict[int, _PairTerms]) -> torch.Tensor:
        if not terms:
            raise SupervisionError("no supervisable frame pairs")
        per_row = torch.cat([robust_loss(term.sq_residuals, self.config.robust_delta)
                             for term in terms.values()])
        loss = per_row.mean()
        if self._depth_targets is not None and self.config.lambda_depth > 0:
            loss = loss + self.config.lambda_depth * self.depth_term(values)
        return loss

    def __call__(self, values: torch.Tensor) -> torch.Tensor:
        return self.loss_from_terms(values, self.pair_terms(values))


def forward_pass(tracks: TrackSet, theta: ParamVector, config: LossConfig,
                 static_mode: bool = False,
                 depth_targets: Optional[np.ndarray] = None) -> ForwardResult:
    """
    Evaluate the scene loss and collect the solved SE(3) field.

    Raises:
        SupervisionError: No frame pair has a supervisable track
    """
    objective = SceneObjective(tracks, config, theta.layout, static_mode, depth_targets)
    values = theta.tensor()
    with torch.no_grad():
        terms = objective.pair_terms(values)
        loss = objective.loss_from_terms(values, terms)

    n_tracks, n_pairs = tracks.n_tracks, tracks.n_frames - 1
    rotations = np.tile(np.eye(3), (n_tracks, n_pairs, 1, 1))
    translations = np.zeros((n_tracks, n_pairs, 3))
    valid = np.zeros((n_tracks, n_pairs), dtype=bool)
    residuals = np.full((n_tracks, n_pairs), np.nan)
    skipped = []
    for t in range(n_pairs):
        term = terms.get(t)
        if term is None:
            skipped.append(t)
            continue
        rows = term.rows.numpy()
        rotations[rows, t] = term.rotations.numpy()
        translations[rows, t] = term.translations.numpy()
        valid[rows, t] = True
        residuals[rows, t] = torch.sqrt(term.sq_residuals).numpy()
    if skipped:
        logger.info("Frame pairs without supervision: %s", skipped)

    field_ = SE3Field(rotations, translations, valid, residuals)
    return ForwardResult(float(loss), field_, residuals, skipped)


@dataclass
class FitResult:
    theta: ParamVector
    history: List[float]
    pretrain_iterations: int = 0

    def __iter__(self):
        return iter((self.theta, self.history))

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else math.nan


def _adam_loop(objective: SceneObjective, theta: ParamVector, schedule: FitSchedule,
               iterations: int, label: str, first_iteration: int = 0) -> Tuple[ParamVector, List[float]]:
    torch.manual_seed(schedule.seed)
    param = theta.tensor().requires_grad_(True)
    optimizer = torch.optim.Adam([param], lr=schedule.lr, betas=schedule.betas)
    decay = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(iterations, 1), eta_min=schedule.lr * schedule.final_lr_scale)
    history = []
    for it in range(iterations):
        try:
            value, grad = evaluate(objective, param.detach(), theta.layout)
        except NonFiniteError as e:
            raise NonFiniteError(e.reason, parameter=e.parameter, index=e.index,
                                 iteration=first_iteration + it) from e
        history.append(float(value))
        param.grad = grad
        optimizer.step()
        decay.step()
        if schedule.log_every and (it % schedule.log_every == 0 or it == iterations - 1):
            logger.info("%s iteration %d/%d loss=%.6e", label, it + 1, iterations, value)
    if iterations == 0:
        return theta, history
    return theta.with_values(param.detach().numpy().copy()), history


def fit_scene(tracks: TrackSet, theta: ParamVector, config: LossConfig, schedule: FitSchedule,
              static_mode: bool = False,
              depth_targets: Optional[np.ndarray] = None) -> FitResult:
    """
    Fit θ to one scene with Adam.

    Args:
        tracks: Observed point tracks
        theta: Initial parameters
        config: Loss switches
        schedule: Learning rate, iteration count and seed
        static_mode: Force every rigidity weight to one
        depth_targets: Optional N×T depths for the supervised depth term

    Returns:
        FitResult with the final θ and the loss of every iteration

    Raises:
        NonFiniteError: Loss or gradient went non-finite, with the iteration index
        SupervisionError: No frame pair can be supervised
    """
    objective = SceneObjective(tracks, config, theta.layout, static_mode, depth_targets)
    label = "static fit" if static_mode else "fit"
    fitted, history = _adam_loop(objective, theta, schedule, schedule.iterations, label)
    return FitResult(fitted, history)


def static_mode_fit(tracks: TrackSet, theta: ParamVector, config: LossConfig,
                    schedule: FitSchedule,
                    depth_targets: Optional[np.ndarray] = None) -> FitResult:
    """fit_scene with every rigidity weight fixed at one: one global transform per frame pair."""
    return fit_scene(tracks, theta, config, schedule, static_mode=True, depth_targets=depth_targets)


def pretrained_fit(tracks: TrackSet, theta: ParamVector, config: LossConfig,
                   schedule: FitSchedule,
                   depth_targets: Optional[np.ndarray] = None) -> FitResult:
    """
    Warm up depths and confidences in static mode, then run the full fit.

    The embeddings are untouched by the static phase (their gradient is zero
    there), so the full fit starts from the warmed depths with the initial
    rigidity.
    """
    if schedule.pretrain_iterations == 0:
        return fit_scene(tracks, theta, config, schedule, depth_targets=depth_targets)
    static = SceneObjective(tracks, config, theta.layout, True, depth_targets)
    warmed, pre_history = _adam_loop(static, theta, schedule, schedule.pretrain_iterations,
                                     "pretrain")
    full = SceneObjective(tracks, config, theta.layout, False, depth_targets)
    fitted, history = _adam_loop(full, warmed, schedule, schedule.iterations, "fit",
                                 first_iteration=schedule.pretrain_iterations)
    return FitResult(fitted, pre_history + history, schedule.pretrain_iterations)


def moving_average(history, window: int = MOVING_AVERAGE_WINDOW) -> np.ndarray:
    history = np.asarray(history, dtype=np.float64)
    if len(history) < window:
        return history.copy()
    return np.convolve(history, np.ones(window) / window, mode="valid")


def is_smoothed_non_increasing(history, window: int = MOVING_AVERAGE_WINDOW,
                               rtol: float = 1e-2, atol: float = 1e-6) -> bool:
    """Whether the moving average of a loss history never rises by more than the tolerance."""
    smooth = moving_average(history, window)
    rises = np.diff(smooth)
    return bool(np.all(rises <= atol + rtol * np.abs(smooth[:-1])))
