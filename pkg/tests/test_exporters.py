import csv

import numpy as np
import pytest
from PIL import Image

from core.errors import RigidTrackError, ValidationError
from core.geometry import SE3, Intrinsics, so3_exp
from core.trackdata import TrackSet
from services.exporters import (export_feature_pca_ppm, export_pointcloud_ply,
                                export_rigidity_map_pgm, export_se3_components_csv,
                                export_trajectory_tum, load_trajectory_tum, pca_colors,
                                read_pointcloud_ply, splat_image)
from services.optimizer import LossConfig, forward_pass
from tests.conftest import ground_truth_theta


@pytest.fixture
def unit_tracks():
    positions = np.array([[[0.0, 0.0], [0.0, 0.0]],
                          [[1.0, 0.0], [1.0, 0.0]],
                          [[0.0, 1.0], [0.0, 1.0]],
                          [[2.0, 2.0], [2.0, 2.0]]])
    visibility = np.array([[True, False], [True, True], [True, True], [True, True]])
    return TrackSet(positions, visibility, Intrinsics(1, 1, 0, 0), (8, 8))


class TestPointCloud:
    def test_unit_depth_vertex(self, tmp_path, unit_tracks):
        path = export_pointcloud_ply(unit_tracks, np.ones((4, 2)), tmp_path / "cloud.ply")
        vertex = read_pointcloud_ply(path)
        assert len(vertex) == 7
        first = vertex[0]
        assert (first["x"], first["y"], first["z"]) == (0.0, 0.0, 1.0)
        assert first["frame"] == 0
        np.testing.assert_array_equal(vertex["frame"], [0, 0, 0, 0, 1, 1, 1])

    def test_is_ascii_with_colours(self, tmp_path, unit_tracks):
        colors = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255], [9, 9, 9]], dtype=np.uint8)
        path = export_pointcloud_ply(unit_tracks, 2.0 * np.ones((4, 2)), tmp_path / "c.ply", colors)
        text = path.read_text(encoding="ascii")
        assert text.startswith("ply\nformat ascii 1.0\n")
        assert "property uchar red" in text
        vertex = read_pointcloud_ply(path)
        assert (vertex[1]["red"], vertex[1]["green"], vertex[1]["blue"]) == (0, 255, 0)
        assert vertex[3]["x"] == 4.0

    def test_rejects_non_positive_depth(self, tmp_path, unit_tracks):
        depths = np.ones((4, 2))
        depths[2, 1] = 0.0
        with pytest.raises(ValidationError):
            export_pointcloud_ply(unit_tracks, depths, tmp_path / "bad.ply")

    def test_static_scene_in_world_frame(self, tmp_path, static_scene):
        tracks = static_scene.tracks
        path = export_pointcloud_ply(tracks, np.abs(static_scene.gt_depths), tmp_path / "w.ply",
                                     trajectory=static_scene.camera_trajectory)
        vertex = read_pointcloud_ply(path)
        for t in range(tracks.n_frames):
            index = np.flatnonzero(tracks.visibility[:, t])
            rows = vertex[vertex["frame"] == t]
            points = np.stack([rows["x"], rows["y"], rows["z"]], axis=1)
            np.testing.assert_allclose(points, static_scene.world_points[index], atol=1e-3)

    def test_unwritable_path(self, tmp_path, unit_tracks):
        with pytest.raises(RigidTrackError, match="cannot write"):
            export_pointcloud_ply(unit_tracks, np.ones((4, 2)), tmp_path)


class TestImages:
    def test_pgm_header_and_patches(self, tmp_path):
        positions = np.array([[2.0, 2.0], [6.0, 3.0]])
        path = export_rigidity_map_pgm(np.ones(2), positions, (8, 6), tmp_path / "r.pgm")
        assert path.read_bytes().startswith(b"P5\n8 6\n255\n")
        image = np.asarray(Image.open(path))
        assert image.shape == (6, 8)
        assert np.all(image[1:4, 1:4] == 255)
        assert np.all(image[2:5, 5:8] == 255)
        assert image[5, 0] == 0
        assert np.count_nonzero(image) == 18

    def test_zero_mask_is_black(self, tmp_path):
        positions = np.array([[2.0, 2.0], [6.0, 3.0]])
        path = export_rigidity_map_pgm(np.zeros(2), positions, (8, 6), tmp_path / "z.pgm")
        assert not np.asarray(Image.open(path)).any()

    def test_rounds_weights(self):
        image = splat_image(np.round(255.0 * np.array([0.5])).astype(np.uint8),
                            np.array([[0.0, 0.0]]), (4, 4))
        assert image[0, 0] == 128
        assert np.count_nonzero(image) == 4

    def test_skips_invisible_tracks(self):
        image = splat_image(np.array([255], dtype=np.uint8), np.array([[np.nan, np.nan]]), (4, 4))
        assert not image.any()

    def test_rejects_weights_outside_unit_interval(self, tmp_path):
        with pytest.raises(ValidationError):
            export_rigidity_map_pgm(np.array([1.5]), np.array([[1.0, 1.0]]), (4, 4),
                                    tmp_path / "x.pgm")

    def test_feature_ppm(self, tmp_path):
        coords = np.array([[0.0, 1.0, -1.0], [1.0, 0.0, 1.0], [0.5, 0.5, 0.0]])
        positions = np.array([[1.0, 1.0], [5.0, 1.0], [3.0, 4.0]])
        path = export_feature_pca_ppm(coords, positions, (8, 6), tmp_path / "f.ppm")
        assert path.read_bytes().startswith(b"P6\n8 6\n255\n")
        image = np.asarray(Image.open(path))
        assert image.shape == (6, 8, 3)
        np.testing.assert_array_equal(image[1, 1], [0, 255, 0])
        np.testing.assert_array_equal(image[1, 5], [255, 0, 255])

    def test_pca_colors_of_constant_component(self):
        colors = pca_colors(np.array([[1.0, 0.0, 2.0], [1.0, 1.0, 2.0]]))
        np.testing.assert_array_equal(colors, [[0, 0, 0], [0, 255, 0]])


class TestTrajectory:
    def test_identity_lines(self, tmp_path):
        path = export_trajectory_tum([SE3.identity()] * 3, tmp_path / "id.txt")
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        assert all(line.endswith("0 0 0 1") for line in lines)
        assert lines[2] == "2 0 0 0 0 0 0 1"

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        poses = [SE3(so3_exp(rng.uniform(-2, 2, 3)), rng.standard_normal(3)) for _ in range(5)]
        stamps, loaded = load_trajectory_tum(export_trajectory_tum(poses, tmp_path / "t.txt"))
        np.testing.assert_array_equal(stamps, np.arange(5))
        for a, b in zip(loaded, poses):
            assert a.allclose(b, atol=1e-9)

    def test_pure_z_translation(self, tmp_path):
        poses = [SE3(np.eye(3), np.array([0.0, 0.0, 0.5 * k])) for k in range(4)]
        rows = np.loadtxt(export_trajectory_tum(poses, tmp_path / "z.txt"))
        assert np.all(np.diff(rows[:, 3]) > 0)
        assert np.all(rows[:, 4:] == rows[0, 4:])

    def test_scalar_part_is_non_negative(self, tmp_path):
        poses = [SE3(so3_exp([0.0, 0.0, 3.0]), np.zeros(3)), SE3(so3_exp([0.0, 3.1, 0.0]), np.zeros(3))]
        rows = np.loadtxt(export_trajectory_tum(poses, tmp_path / "q.txt"))
        assert np.all(rows[:, 7] >= 0)

    def test_custom_timestamps(self, tmp_path):
        path = export_trajectory_tum([SE3.identity()] * 2, tmp_path / "s.txt", [0.5, 1.25])
        assert path.read_text().splitlines()[1].startswith("1.25 ")

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(RigidTrackError, match="cannot write"):
            export_trajectory_tum([SE3.identity()], tmp_path)

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 1 2\n")
        with pytest.raises(ValidationError):
            load_trajectory_tum(path)


def test_se3_components_rows(tmp_path, static_scene):
    field = forward_pass(static_scene.tracks, ground_truth_theta(static_scene), LossConfig()).field
    path = export_se3_components_csv(field, tmp_path / "se3.csv")
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["track", "pair", "tx", "ty", "tz", "rx", "ry", "rz"]
    assert len(rows) - 1 == field.valid.sum()
    i, t = int(rows[1][0]), int(rows[1][1])
    assert field.valid[i, t]
    np.testing.assert_allclose([float(v) for v in rows[1][2:5]], field.translations[i, t], rtol=1e-8)
