import numpy as np
import pytest
import torch

from core.errors import ValidationError
from core.rigidity import (RigidityEmbeddings, feature_pca, rigidity_mask, rigidity_matrix,
                           rigidity_response_grid)


def test_identical_embeddings_are_fully_rigid():
    emb = RigidityEmbeddings(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(rigidity_mask(emb, 0), [1.0, 1.0, 0.0])


def test_opposite_embeddings_clip_to_zero():
    emb = RigidityEmbeddings(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    np.testing.assert_array_equal(rigidity_mask(emb, 0), [1.0, 0.0])


def test_zero_embedding_keeps_unit_self_weight():
    emb = RigidityEmbeddings(np.array([[0.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_array_equal(rigidity_mask(emb, 0), [1.0, 0.0])


def test_mask_range_and_symmetry():
    rng = np.random.default_rng(0)
    emb = RigidityEmbeddings(rng.standard_normal((20, 5)))
    masks = np.stack([rigidity_mask(emb, i) for i in range(20)])
    assert np.all(masks >= 0.0) and np.all(masks <= 1.0)
    np.testing.assert_array_equal(np.diag(masks), np.ones(20))
    np.testing.assert_allclose(masks, masks.T, atol=1e-15)


def test_out_of_range_track():
    emb = RigidityEmbeddings(np.ones((3, 2)))
    with pytest.raises(ValidationError):
        rigidity_mask(emb, 3)


def test_matrix_matches_mask():
    rng = np.random.default_rng(1)
    features = rng.standard_normal((12, 4))
    matrix = rigidity_matrix(torch.from_numpy(features)).numpy()
    emb = RigidityEmbeddings(features)
    for i in range(12):
        np.testing.assert_allclose(matrix[i], rigidity_mask(emb, i), atol=1e-12)
    np.testing.assert_array_equal(matrix, matrix.T)


def test_matrix_of_equal_rows_is_exactly_one():
    features = torch.full((6, 3), 0.7, dtype=torch.float64)
    assert torch.equal(rigidity_matrix(features), torch.ones(6, 6, dtype=torch.float64))


def test_one_hot_bodies_are_exactly_zero_across():
    features = torch.tensor([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]], dtype=torch.float64)
    expected = torch.tensor([[1.0, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]],
                            dtype=torch.float64)
    assert torch.equal(rigidity_matrix(features), expected)


def test_initial_embeddings_are_near_rigid():
    emb = RigidityEmbeddings.initial(50, dim=16, rng=np.random.default_rng(2))
    assert emb.features.shape == (50, 16)
    assert rigidity_mask(emb, 0).min() > 0.8


def test_response_grid_shape_and_cells():
    rng = np.random.default_rng(3)
    emb = RigidityEmbeddings(rng.standard_normal((9, 3)))
    track_grid = np.arange(9).reshape(3, 3)
    grid = rigidity_response_grid(emb, track_grid)
    assert grid.shape == (3, 3, 9)
    np.testing.assert_array_equal(grid[1, 2], rigidity_mask(emb, 5))


def test_feature_pca_is_deterministic_and_sign_fixed():
    rng = np.random.default_rng(4)
    emb = RigidityEmbeddings(rng.standard_normal((30, 6)))
    coords = feature_pca(emb)
    assert coords.shape == (30, 3)
    np.testing.assert_array_equal(coords, feature_pca(emb))
    flipped = feature_pca(RigidityEmbeddings(-emb.features))
    np.testing.assert_allclose(np.abs(flipped), np.abs(coords), atol=1e-10)
    variances = coords.var(axis=0)
    assert variances[0] >= variances[1] >= variances[2]


def test_feature_pca_of_constant_embeddings_is_zero():
    coords = feature_pca(RigidityEmbeddings(np.ones((5, 4))))
    np.testing.assert_array_equal(coords, np.zeros((5, 3)))


def test_feature_pca_pads_missing_components():
    coords = feature_pca(RigidityEmbeddings(np.random.default_rng(5).standard_normal((6, 2))))
    np.testing.assert_array_equal(coords[:, 2], np.zeros(6))
