"""Weighted least-squares SE(3) estimation between weighted 3D point sets."""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from core.errors import DegenerateGeometryError, ValidationError
from core.geometry import SE3

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
DEGENERATE_RATIO = 1e-6
DAMPING_RATIO = 1e-3
DAMPING = 1e-6
# relative size below which the implicit-differentiation system is damped
IMPLICIT_GAP = 1e-6


@dataclass(frozen=True)
class WeightedCorrespondences:
    """Source points (frame t) and target points (frame t+1) with per-point weights."""
    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        source = np.asarray(self.source, dtype=np.float64)
        target = np.asarray(self.target, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if source.ndim != 2 or source.shape[1] != 3 or target.shape != source.shape:
            raise ValidationError(
                f"source and target must both be M×3, got {source.shape} and {target.shape}")
        if len(weights) != len(source):
            raise ValidationError(f"{len(weights)} weights for {len(source)} correspondences")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValidationError("weights must be finite and non-negative")
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "weights", weights)


def _hat(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    return torch.stack([
        torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
        torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
        torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
    ], dim=-2)


def _vee(m: torch.Tensor) -> torch.Tensor:
    return torch.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], dim=-1)


class ProcrustesRotation(torch.autograd.Function):
    """
    R = argmax_{R ∈ SO(3)} tr(Rᵀ M) for a batch of 3×3 matrices M.

    The backward pass differentiates the stationarity condition
    skew(Rᵀ M) = 0 instead of the SVD, so repeated singular values cost
    nothing; only the reflection-ambiguous case (two smallest signed
    singular values summing to ~0) needs the damping term.
    """

    @staticmethod
    def forward(ctx, M):
        U, _, Vh = torch.linalg.svd(M)
        det = torch.linalg.det(U @ Vh)
        D = torch.ones(M.shape[:-1], dtype=M.dtype, device=M.device)
        D[..., -1] = torch.sign(det)
        R = U @ torch.diag_embed(D) @ Vh
        ctx.save_for_backward(R, M)
        return R

    @staticmethod
    def backward(ctx, grad_R):
        R, M = ctx.saved_tensors
        sym = R.transpose(-1, -2) @ M
        sym = 0.5 * (sym + sym.transpose(-1, -2))
        trace = sym.diagonal(dim1=-2, dim2=-1).sum(-1)
        eye = torch.eye(3, dtype=M.dtype, device=M.device)
        system = trace[..., None, None] * eye - sym

        eigenvalues = torch.linalg.eigvalsh(system)
        scale = eigenvalues.abs().amax(-1).clamp_min(1e-300)
        near_singular = eigenvalues.abs().amin(-1) < IMPLICIT_GAP * scale
        damping = torch.where(near_singular, IMPLICIT_GAP * scale, torch.zeros_like(scale))
        system = system + damping[..., None, None] * eye

        g = _vee(R.transpose(-1, -2) @ grad_R - grad_R.transpose(-1, -2) @ R)
        y = torch.linalg.solve(system, g.unsqueeze(-1)).squeeze(-1)
        return R @ _hat(y)


def _weighted_outer(w: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Σⱼ w_bj aⱼ bⱼᵀ for every row b of w."""
    outer = (a[:, :, None] * b[:, None, :]).reshape(len(a), 9)
    return (w @ outer).reshape(len(w), 3, 3)


def rank_ratio(source: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Second over first singular value of the weighted, centred source points (per row of weights)."""
    with torch.no_grad():
        total = weights.sum(-1, keepdim=True).clamp_min(1e-300)
        w = weights / total
        mean = w @ source
        scatter = _weighted_outer(w, source, source) - mean[:, :, None] * mean[:, None, :]
        eig = torch.linalg.eigvalsh(0.5 * (scatter + scatter.transpose(-1, -2))).clamp_min(0.0)
        top = eig[..., 2]
        return torch.where(top > 0, torch.sqrt(eig[..., 1] / top.clamp_min(1e-300)),
                           torch.zeros_like(top))


def weighted_procrustes(source: torch.Tensor, target: torch.Tensor, weights: torch.Tensor,
                        strict: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Batched weighted Procrustes over one shared set of correspondences.

    Args:
        source: M×3 points at frame t
        target: M×3 points at frame t+1
        weights: B×M non-negative weights, one row per solve
        strict: Raise on underdetermined or degenerate rows instead of damping

    Returns:
        (B×3×3 rotations, B×3 translations) minimising Σ w‖target − (R source + t)‖²
    """
    weights = weights.to(source.dtype)
    if weights.dim() == 1:
        weights = weights.unsqueeze(0)
    effective = (weights > WEIGHT_FLOOR).sum(-1)
    ratio = rank_ratio(source, weights)
    if strict:
        if bool((effective < 3).any()):
            raise DegenerateGeometryError("underdetermined pose")
        if bool((ratio < DEGENERATE_RATIO).any()):
            raise DegenerateGeometryError("degenerate configuration")

    w = weights / weights.sum(-1, keepdim=True).clamp_min(1e-300)
    source_mean = w @ source
    target_mean = w @ target
    # M = Σ w (target − t̄)(source − s̄)ᵀ
    M = (_weighted_outer(w, target, source)
         - target_mean[:, :, None] * source_mean[:, None, :])
    if not strict:
        damped = ratio < DAMPING_RATIO
        if bool(damped.any()):
            logger.debug("Damping %d near-degenerate Procrustes solves", int(damped.sum()))
            eye = torch.eye(3, dtype=M.dtype, device=M.device)
            M = M + (DAMPING * damped.to(M.dtype))[:, None, None] * eye
    R = ProcrustesRotation.apply(M)
    t = target_mean - (R @ source_mean.unsqueeze(-1)).squeeze(-1)
    return R, t


def solve_weighted_procrustes(c: WeightedCorrespondences) -> SE3:
    """
    Solve argmin over SE(3) of Σᵢ wᵢ‖targetᵢ − (R sourceᵢ + t)‖².

    Raises:
        DegenerateGeometryError: "underdetermined pose" with fewer than 3 effective
            correspondences, "degenerate configuration" for collinear support
    """
    source = torch.from_numpy(c.source)
    target = torch.from_numpy(c.target)
    weights = torch.from_numpy(c.weights).unsqueeze(0)
    with torch.no_grad():
        R, t = weighted_procrustes(source, target, weights, strict=True)
    return SE3(R[0].numpy(), t[0].numpy())


def residual(c: WeightedCorrespondences, X: SE3) -> float:
    """Weighted sum of squared alignment errors Σᵢ wᵢ‖targetᵢ − X(sourceᵢ)‖²."""
    errors = c.target - X.apply(c.source)
    return float(np.sum(c.weights * np.sum(errors ** 2, axis=1)))
