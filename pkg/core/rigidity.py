"""Rigidity embeddings and soft per-track rigidity masks."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from sklearn.decomposition import PCA

from core.errors import ValidationError

DEFAULT_EMBEDDING_DIM = 16
INIT_SIGMA = 0.1
COSINE_EPS = 1e-12


@dataclass(frozen=True)
class RigidityEmbeddings:
    """Per-track embedding rows (N×M), stored unnormalized."""
    features: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ValidationError(f"embeddings must be N×M, got shape {features.shape}")
        object.__setattr__(self, "features", features)

    @property
    def n_tracks(self) -> int:
        return self.features.shape[0]

    @classmethod
    def initial(cls, n_tracks: int, dim: int = DEFAULT_EMBEDDING_DIM,
                rng: Optional[np.random.Generator] = None) -> "RigidityEmbeddings":
        """Near-rigid start: ones plus isotropic Gaussian noise of σ = 0.1."""
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(1.0 + INIT_SIGMA * rng.standard_normal((n_tracks, dim)))


def rigidity_matrix(features: torch.Tensor) -> torch.Tensor:
    """
    All-pairs rigidity max(0, cos(fᵢ, fⱼ)) with a unit diagonal.

    The Gram matrix is reduced elementwise so every entry uses the same
    summation order: the result is exactly symmetric, and identical rows give
    exactly one.
    """
    gram = (features[:, None, :] * features[None, :, :]).sum(-1)
    sq_norms = torch.diagonal(gram)
    denom = torch.sqrt(sq_norms[:, None] * sq_norms[None, :]).clamp_min(COSINE_EPS)
    rigidity = torch.relu(gram / denom)
    eye = torch.eye(len(features), dtype=torch.bool, device=features.device)
    return torch.where(eye, torch.ones_like(rigidity), rigidity)


def rigidity_mask(emb: RigidityEmbeddings, i: int) -> np.ndarray:
    """Rigidity weights in [0, 1] from track i to every track."""
    if not 0 <= i < emb.n_tracks:
        raise ValidationError(f"track index {i} out of range for {emb.n_tracks} tracks")
    f = emb.features
    dots = np.sum(f * f[i], axis=1)
    sq_norms = np.sum(f * f, axis=1)
    denom = np.maximum(np.sqrt(sq_norms * sq_norms[i]), COSINE_EPS)
    out = np.maximum(0.0, dots / denom)
    out[i] = 1.0
    return out


def rigidity_response_grid(emb: RigidityEmbeddings, track_grid: np.ndarray) -> np.ndarray:
    """
    Rigidity maps for a grid of query tracks.

    Returns:
        rows×cols×N array; cell (r, c) is rigidity_mask at track_grid[r, c]
    """
    track_grid = np.asarray(track_grid, dtype=int)
    if track_grid.ndim != 2:
        raise ValidationError(f"track grid must be 2-D, got shape {track_grid.shape}")
    rows, cols = track_grid.shape
    grid = np.empty((rows, cols, emb.n_tracks))
    for r in range(rows):
        for c in range(cols):
            grid[r, c] = rigidity_mask(emb, int(track_grid[r, c]))
    return grid


def feature_pca(emb: RigidityEmbeddings, k: int = 3) -> np.ndarray:
    """
    Project mean-centred embeddings onto their top-k principal components.

    Components are ordered by decreasing variance; each is sign-fixed so its
    largest-magnitude loading is positive. Missing components (rank < k) are zero.
    """
    features = emb.features
    n_tracks, dim = features.shape
    if n_tracks < k:
        raise ValidationError(f"need at least {k} tracks for a {k}-component PCA")
    coords = np.zeros((n_tracks, k))
    centred = features - features.mean(axis=0)
    if not np.any(centred):
        return coords

    n_components = min(k, dim)
    pca = PCA(n_components=n_components, svd_solver="full")
    pca.fit(features)
    components = pca.components_.copy()
    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(n_components), pivot])
    components *= np.where(signs == 0, 1.0, signs)[:, None]
    coords[:, :n_components] = centred @ components.T
    return coords
