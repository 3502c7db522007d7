"""Reverse-mode gradients of scalar losses over the flat scene parameter vector."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from core.errors import NonFiniteError, ValidationError
from core.rigidity import DEFAULT_EMBEDDING_DIM, RigidityEmbeddings

logger = logging.getLogger(__name__)

INITIAL_CONFIDENCE_LOGIT = 2.0
INITIAL_LOG_DEPTH = 0.0

LossFunction = Callable[[torch.Tensor], torch.Tensor]
GradientFunction = Callable[["ParamVector"], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class ParamLayout:
    """Named layout of the flat vector: log_depths N×T, embeddings N×M, confidence_logits N×(T−1)."""
    n_tracks: int
    n_frames: int
    embedding_dim: int = DEFAULT_EMBEDDING_DIM

    @property
    def shapes(self) -> Dict[str, Tuple[int, int]]:
        return {
            "log_depths": (self.n_tracks, self.n_frames),
            "embeddings": (self.n_tracks, self.embedding_dim),
            "confidence_logits": (self.n_tracks, self.n_frames - 1),
        }

    @property
    def size(self) -> int:
        return sum(rows * cols for rows, cols in self.shapes.values())

    def offsets(self) -> Dict[str, int]:
        out, offset = {}, 0
        for name, (rows, cols) in self.shapes.items():
            out[name] = offset
            offset += rows * cols
        return out

    def split(self, values):
        """Views of a flat numpy array or tensor as the three named blocks."""
        blocks = {}
        for name, start in self.offsets().items():
            rows, cols = self.shapes[name]
            blocks[name] = values[start:start + rows * cols].reshape(rows, cols)
        return blocks

    def name_of(self, index: int) -> str:
        """Human-readable coordinate name, e.g. 'embeddings[3,1]'."""
        for name, start in self.offsets().items():
            rows, cols = self.shapes[name]
            if start <= index < start + rows * cols:
                row, col = divmod(index - start, cols)
                return f"{name}[{row},{col}]"
        raise ValidationError(f"index {index} outside a layout of size {self.size}")


@dataclass(frozen=True)
class ParamVector:
    """Flat vector of every optimizable real, with its named layout."""
    layout: ParamLayout
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(values) != self.layout.size:
            raise ValidationError(
                f"parameter vector has {len(values)} entries, layout needs {self.layout.size}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def pack(cls, log_depths: np.ndarray, embeddings: np.ndarray,
             confidence_logits: np.ndarray) -> "ParamVector":
        log_depths = np.asarray(log_depths, dtype=np.float64)
        embeddings = np.asarray(embeddings, dtype=np.float64)
        confidence_logits = np.asarray(confidence_logits, dtype=np.float64)
        layout = ParamLayout(log_depths.shape[0], log_depths.shape[1], embeddings.shape[1])
        for name, block in (("embeddings", embeddings), ("confidence_logits", confidence_logits)):
            if block.shape != layout.shapes[name]:
                raise ValidationError(
                    f"{name} has shape {block.shape}, expected {layout.shapes[name]}")
        return cls(layout, np.concatenate([log_depths.ravel(), embeddings.ravel(),
                                           confidence_logits.ravel()]))

    @classmethod
    def initial(cls, layout: ParamLayout, seed: int = 0) -> "ParamVector":
        """Unit-depth plane, near-rigid embeddings, confident weights."""
        rng = np.random.default_rng(seed)
        embeddings = RigidityEmbeddings.initial(layout.n_tracks, layout.embedding_dim, rng)
        return cls.pack(
            np.full(layout.shapes["log_depths"], INITIAL_LOG_DEPTH),
            embeddings.features,
            np.full(layout.shapes["confidence_logits"], INITIAL_CONFIDENCE_LOGIT),
        )

    def unpack(self) -> Dict[str, np.ndarray]:
        return {name: block.copy() for name, block in self.layout.split(self.values).items()}

    @property
    def log_depths(self) -> np.ndarray:
        return self.layout.split(self.values)["log_depths"]

    @property
    def embeddings(self) -> RigidityEmbeddings:
        return RigidityEmbeddings(self.layout.split(self.values)["embeddings"])

    @property
    def confidence_logits(self) -> np.ndarray:
        return self.layout.split(self.values)["confidence_logits"]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.layout, values)

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.values, dtype=torch.float64)


def _first_non_finite(values: torch.Tensor) -> Optional[int]:
    bad = torch.nonzero(~torch.isfinite(values)).flatten()
    return int(bad[0]) if len(bad) else None


def _blame(value: torch.Tensor, x: torch.Tensor) -> Optional[int]:
    """Coordinate behind a non-finite loss at finite parameters: first non-finite partial, else the largest."""
    if not value.requires_grad:
        return None
    (grad,) = torch.autograd.grad(value, x, allow_unused=True)
    if grad is None:
        return None
    index = _first_non_finite(grad)
    if index is not None:
        return index
    magnitudes = grad.abs()
    return int(torch.argmax(magnitudes)) if bool((magnitudes > 0).any()) else None


def evaluate(loss: LossFunction, values: torch.Tensor,
             layout: ParamLayout) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Loss value and reverse-mode gradient at a flat float64 tensor.

    Raises:
        NonFiniteError: Non-finite loss or gradient, naming the first offending coordinate
    """
    x = values.detach().clone().requires_grad_(True)
    value = loss(x)
    if not bool(torch.isfinite(value)):
        index = _first_non_finite(values)
        if index is None:
            index = _blame(value, x)
        raise NonFiniteError("non-finite loss",
                             parameter=layout.name_of(index) if index is not None else None,
                             index=index)
    (grad,) = torch.autograd.grad(value, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    index = _first_non_finite(grad)
    if index is not None:
        raise NonFiniteError("non-finite gradient", parameter=layout.name_of(index), index=index)
    return value.detach(), grad


def gradient(loss: LossFunction, theta: ParamVector) -> Tuple[float, np.ndarray]:
    """Return (loss value, ∂loss/∂θ) by reverse-mode accumulation."""
    value, grad = evaluate(loss, theta.tensor(), theta.layout)
    return float(value), grad.numpy().copy()


@dataclass
class GradientCheckReport:
    """Outcome of a finite-difference comparison."""
    max_rel_err: float
    worst_index: int
    worst_name: str
    passed: bool
    n_checked: int
    failures: List[Tuple[str, float, float]] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.n_checked} coordinates, max_rel_err={self.max_rel_err:.3e}, "
                f"worst={self.worst_name}")


def check_gradients(loss: LossFunction, theta: ParamVector, h: float = 1e-5,
                    rel_tol: float = 1e-3, abs_tol: float = 1e-6, small: float = 1e-3,
                    coordinates: Optional[Sequence[int]] = None,
                    gradient_fn: Optional[GradientFunction] = None) -> GradientCheckReport:
    """
    Compare the analytic gradient against central finite differences.

    A coordinate passes when its relative error is below rel_tol, or, where
    both gradients are smaller than `small`, when the absolute error is
    below abs_tol. Failures are reported, never raised.
    """
    _, analytic = (gradient_fn or (lambda th: gradient(loss, th)))(theta)
    indices = range(theta.layout.size) if coordinates is None else coordinates

    def at(values: np.ndarray) -> float:
        with torch.no_grad():
            return float(loss(torch.tensor(values, dtype=torch.float64)))

    max_rel, worst_index, worst_score = 0.0, -1, -1.0
    failures = []
    base = theta.values.copy()
    n_checked = 0
    for index in indices:
        index = int(index)
        plus, minus = base.copy(), base.copy()
        plus[index] += h
        minus[index] -= h
        numeric = (at(plus) - at(minus)) / (2.0 * h)
        a = float(analytic[index])
        scale = max(abs(a), abs(numeric))
        rel = abs(a - numeric) / scale if scale > 0 else 0.0
        if scale < small:
            ok = abs(a - numeric) < abs_tol
            score = abs(a - numeric) / abs_tol
        else:
            ok = rel < rel_tol
            score = rel / rel_tol
        max_rel = max(max_rel, rel)
        if score > worst_score:
            worst_score, worst_index = score, index
        if not ok:
            failures.append((theta.layout.name_of(index), a, numeric))
        n_checked += 1

    worst_name = theta.layout.name_of(worst_index) if worst_index >= 0 else ""
    report = GradientCheckReport(max_rel, worst_index, worst_name, not failures, n_checked, failures)
    logger.info("Gradient check %s", report.summary())
    return report
