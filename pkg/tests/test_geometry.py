import math

import numpy as np
import pytest

from core.errors import DegenerateGeometryError, ValidationError
from core.geometry import (SE3, AlignmentMode, Intrinsics, align_trajectories, project,
                           se3_exp, se3_log, so3_exp, so3_log, unproject, umeyama)


def random_se3(rng, max_angle=2.5):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return SE3(so3_exp(axis * rng.uniform(0.0, max_angle)), rng.standard_normal(3))


def smooth_trajectory(n=6):
    return [se3_exp(np.array([0.05 * k, -0.03 * k, 0.02 * k, 0.3 * k, 0.1 * k ** 2, -0.2 * k]))
            for k in range(n)]


class TestIntrinsicsAndSE3:
    def test_rejects_non_positive_focal_length(self):
        with pytest.raises(ValidationError):
            Intrinsics(0.0, 1.0, 0.0, 0.0)

    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(ValidationError):
            SE3(2.0 * np.eye(3), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValidationError):
            SE3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            X = random_se3(rng)
            assert (X @ X.inverse()).allclose(SE3.identity())
            assert (X.inverse() @ X).allclose(SE3.identity())

    def test_compose_is_associative(self):
        rng = np.random.default_rng(1)
        A, B, C = (random_se3(rng) for _ in range(3))
        assert ((A @ B) @ C).allclose(A @ (B @ C))

    def test_apply_matches_matrix(self):
        rng = np.random.default_rng(2)
        X = random_se3(rng)
        p = rng.standard_normal(3)
        expected = (X.matrix @ np.append(p, 1.0))[:3]
        np.testing.assert_allclose(X.apply(p), expected, atol=1e-12)

    def test_center_of_world_to_camera_pose(self):
        X = SE3(np.eye(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(X.center, [-1.0, -2.0, -3.0])


class TestProjection:
    def test_principal_ray(self):
        np.testing.assert_allclose(project(Intrinsics(1, 1, 0, 0), [0, 0, 1]), [0, 0])

    def test_pinhole_arithmetic(self):
        np.testing.assert_allclose(project(Intrinsics(100, 100, 50, 50), [0.5, 0.5, 1]), [100, 100])

    def test_behind_camera(self):
        with pytest.raises(DegenerateGeometryError, match="behind-camera point"):
            project(Intrinsics(1, 1, 0, 0), [0, 0, -1])

    @pytest.mark.parametrize("K, p, d, expected", [
        ((1, 1, 0, 0), (0, 0), 5, (0, 0, 5)),
        ((2, 2, 1, 1), (1, 1), 1, (0, 0, 1)),
        ((100, 100, 50, 50), (150, 50), 2, (2, 0, 2)),
    ])
    def test_unproject_examples(self, K, p, d, expected):
        np.testing.assert_allclose(unproject(Intrinsics(*K), p, d), expected, atol=1e-12)

    def test_non_positive_depth(self):
        with pytest.raises(DegenerateGeometryError, match="non-positive depth"):
            unproject(Intrinsics(1, 1, 0, 0), (0, 0), 0.0)

    def test_project_unproject_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            K = Intrinsics(*rng.uniform(50, 500, 2), *rng.uniform(0, 300, 2))
            p = rng.uniform(0, 640, 2)
            d = rng.uniform(0.1, 50)
            np.testing.assert_allclose(project(K, unproject(K, p, d)), p, atol=1e-9)


class TestLieMaps:
    def test_log_of_identity(self):
        np.testing.assert_allclose(se3_log(SE3.identity()), np.zeros(6), atol=1e-15)

    def test_log_of_pure_translation(self):
        np.testing.assert_allclose(se3_log(SE3(np.eye(3), [1.0, 2.0, 3.0])),
                                   [0, 0, 0, 1, 2, 3], atol=1e-12)

    def test_log_of_quarter_turn(self):
        X = SE3(so3_exp([0, 0, math.pi / 2]), np.zeros(3))
        np.testing.assert_allclose(se3_log(X), [0, 0, math.pi / 2, 0, 0, 0], atol=1e-12)

    def test_exp_of_zero_and_translation(self):
        assert se3_exp(np.zeros(6)).allclose(SE3.identity(), atol=0.0)
        X = se3_exp(np.array([0, 0, 0, 1.0, 2.0, 3.0]))
        assert X.allclose(SE3(np.eye(3), [1.0, 2.0, 3.0]), atol=1e-12)

    def test_exp_log_roundtrip(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            omega = rng.standard_normal(3)
            omega *= rng.uniform(0, 3.1) / np.linalg.norm(omega)
            xi = np.concatenate([omega, rng.standard_normal(3)])
            np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-7)

    def test_small_angle_branch(self):
        xi = np.array([1e-9, -2e-9, 5e-10, 0.3, -0.1, 0.2])
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)

    def test_log_norm_bounded_by_pi(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            assert np.linalg.norm(se3_log(random_se3(rng, max_angle=math.pi))[:3]) <= math.pi + 1e-12

    def test_half_turn_axis_sign_is_canonical(self):
        for axis in ([0, 0, 1.0], [0, 0, -1.0]):
            omega = so3_log(so3_exp(np.array(axis) * math.pi))
            np.testing.assert_allclose(omega, [0, 0, math.pi], atol=1e-9)
        omega = so3_log(so3_exp(np.array([0.0, -1.0, 1.0]) / math.sqrt(2) * math.pi))
        assert omega[1] > 0


class TestAlignment:
    def test_identical_trajectories(self):
        ref = smooth_trajectory()
        _, ate = align_trajectories(ref, ref)
        assert ate < 1e-12

    def test_global_offset_is_absorbed(self):
        ref = smooth_trajectory()
        shift = SE3(np.eye(3), [1.0, 1.0, 1.0])
        est = [pose @ shift.inverse() for pose in ref]
        for mode in AlignmentMode:
            _, ate = align_trajectories(est, ref, mode)
            assert ate < 1e-9

    def test_sim3_absorbs_scale_and_rigid_motion(self):
        rng = np.random.default_rng(6)
        ref = smooth_trajectory()
        G = random_se3(rng)
        est = [SE3(pose.rotation, 3.0 * pose.translation) @ G.inverse() for pose in ref]
        _, ate = align_trajectories(est, ref, AlignmentMode.SIM3)
        assert ate < 1e-7

    def test_matches_independent_umeyama(self):
        ref = smooth_trajectory()
        est = list(ref)
        est[2] = SE3(ref[2].rotation, ref[2].translation + np.array([0.2, -0.1, 0.05]))
        alignment, ate = align_trajectories(est, ref, AlignmentMode.SIM3)

        # independent closed form on the centres
        src = np.array([p.center for p in est])
        dst = np.array([p.center for p in ref])
        mu_s, mu_d = src.mean(0), dst.mean(0)
        cov = (dst - mu_d).T @ (src - mu_s) / len(src)
        U, D, Vt = np.linalg.svd(cov)
        S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
        R = U @ S @ Vt
        s = np.trace(np.diag(D) @ S) / np.mean(np.sum((src - mu_s) ** 2, axis=1))
        t = mu_d - s * R @ mu_s
        expected = np.sqrt(np.mean(np.sum((s * src @ R.T + t - dst) ** 2, axis=1)))
        assert ate == pytest.approx(expected, abs=1e-12)
        assert alignment.scale == pytest.approx(s, abs=1e-12)

    def test_too_few_poses(self):
        ref = smooth_trajectory(2)
        with pytest.raises(DegenerateGeometryError, match="underdetermined alignment"):
            align_trajectories(ref, ref)

    def test_collinear_centres(self):
        ref = [SE3(np.eye(3), [0.0, 0.0, float(k)]) for k in range(5)]
        with pytest.raises(DegenerateGeometryError, match="degenerate alignment"):
            align_trajectories(ref, ref)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            align_trajectories(smooth_trajectory(4), smooth_trajectory(5))

    def test_umeyama_recovers_similarity(self):
        rng = np.random.default_rng(7)
        source = rng.standard_normal((10, 3))
        R = so3_exp([0.3, -0.2, 0.5])
        target = 2.5 * source @ R.T + np.array([1.0, 0.0, -1.0])
        alignment = umeyama(source, target, with_scale=True)
        np.testing.assert_allclose(alignment.rotation, R, atol=1e-10)
        assert alignment.scale == pytest.approx(2.5)
