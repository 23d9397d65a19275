"""Camera geometry: projection round-trips, rotations, view-direction features."""

import numpy as np
import pytest

from fwdsynth import autodiff as ad
from fwdsynth.errors import DomainError, ShapeError
from fwdsynth.geometry import (
    Intrinsics,
    Pose,
    camera_center,
    check_rotation,
    look_at,
    project,
    rotation_about_axis,
    rotation_residual,
    unproject,
    unproject_t,
    view_delta,
    view_delta_t,
)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return rotation_about_axis(axis, rng.uniform(-np.pi, np.pi))


def random_intr(rng: np.random.Generator) -> Intrinsics:
    w = int(rng.integers(8, 33))
    h = int(rng.integers(8, 33))
    f = rng.uniform(0.8, 1.5) * max(h, w)
    return Intrinsics(f, f * rng.uniform(0.9, 1.1), (w - 1) / 2.0, (h - 1) / 2.0, w, h)


class TestRotations:
    def test_rotation_about_axis_is_orthonormal(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            R = random_rotation(rng)
            assert rotation_residual(R) < 1e-12
            np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)

    def test_check_rotation_rejects_scaled(self):
        with pytest.raises(DomainError):
            check_rotation(np.eye(3) * 1.001, tol=1e-6)

    def test_camera_center_inverts_pose(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            R = random_rotation(rng)
            c = rng.standard_normal(3) * 2.0
            pose = Pose(R, -R @ c)
            np.testing.assert_allclose(camera_center(pose), c, atol=1e-12)

    def test_look_at_faces_target(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            eye = rng.standard_normal(3)
            target = eye + rng.standard_normal(3) * 2.0 + np.array([0.0, 0.0, 3.0])
            pose = look_at(eye, target)
            assert rotation_residual(pose.R) < 1e-9
            np.testing.assert_allclose(camera_center(pose), eye, atol=1e-9)
            forward = pose.R[2, :]
            to_target = (target - eye) / np.linalg.norm(target - eye)
            np.testing.assert_allclose(forward, to_target, atol=1e-9)


class TestProjectionRoundTrip:
    def test_unproject_project_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            intr = random_intr(rng)
            R = random_rotation(rng)
            pose = Pose(R, rng.standard_normal(3) * 0.1)
            depth = rng.uniform(1.0, 4.0, (intr.height, intr.width))
            pts = unproject(depth, intr, pose)
            x, y, z, in_front = project(pts, intr, pose)
            assert in_front.all()
            gx, gy = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
            np.testing.assert_allclose(x, gx.ravel(), atol=1e-8)
            np.testing.assert_allclose(y, gy.ravel(), atol=1e-8)
            np.testing.assert_allclose(z, depth.ravel(), atol=1e-10)

    def test_points_behind_camera_are_culled(self):
        intr = Intrinsics(10.0, 10.0, 4.5, 4.5, 10, 10)
        pose = Pose(np.eye(3), np.zeros(3))
        pts = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -2.0], [0.0, 0.0, 0.0]])
        _, _, _, in_front = project(pts, intr, pose)
        np.testing.assert_array_equal(in_front, [True, False, False])

    def test_unproject_rejects_negative_depth(self):
        intr = Intrinsics(10.0, 10.0, 4.5, 4.5, 10, 10)
        pose = Pose(np.eye(3), np.zeros(3))
        depth = -np.ones((10, 10))
        with pytest.raises(DomainError):
            unproject(depth, intr, pose)

    def test_unproject_rejects_wrong_shape(self):
        intr = Intrinsics(10.0, 10.0, 4.5, 4.5, 10, 10)
        pose = Pose(np.eye(3), np.zeros(3))
        with pytest.raises(ShapeError):
            unproject(np.ones((4, 4)), intr, pose)

    def test_unproject_t_matches_numpy(self):
        rng = np.random.default_rng(12)
        intr = random_intr(rng)
        pose = Pose(random_rotation(rng), rng.standard_normal(3) * 0.1)
        depth = rng.uniform(0.5, 3.0, (intr.height, intr.width))
        expect = unproject(depth, intr, pose)
        got = unproject_t(ad.Tensor(depth.ravel()), intr, pose)
        np.testing.assert_allclose(got.data, expect, atol=1e-12)

    def test_unproject_t_gradient(self):
        rng = np.random.default_rng(13)
        intr = Intrinsics(9.0, 9.0, 3.5, 3.5, 8, 8)
        pose = Pose(random_rotation(rng), rng.standard_normal(3) * 0.1)
        depth = rng.uniform(1.0, 2.0, 64)
        w = rng.standard_normal((64, 3))
        t = ad.Tensor(depth.copy(), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.tsum(unproject_t(t, intr, pose) * ad.Tensor(w))
            ad.backward(loss, tape)
        h = 1e-6
        fd = np.zeros(64)
        for i in range(64):
            dp, dm = depth.copy(), depth.copy()
            dp[i] += h
            dm[i] -= h
            up = (unproject_t(ad.Tensor(dp), intr, pose).data * w).sum()
            dn = (unproject_t(ad.Tensor(dm), intr, pose).data * w).sum()
            fd[i] = (up - dn) / (2 * h)
        np.testing.assert_allclose(t.grad, fd, rtol=1e-5, atol=1e-7)


class TestViewDelta:
    def test_unit_direction_and_dot_range(self):
        rng = np.random.default_rng(21)
        pts = rng.standard_normal((100, 3))
        src = np.array([0.0, 0.0, -4.0])
        tgt = np.array([1.0, 0.5, -4.0])
        feat = view_delta(pts, src, tgt)
        assert feat.shape == (100, 4)
        norms = np.linalg.norm(feat[:, :3], axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        assert (feat[:, 3] >= -1.0).all() and (feat[:, 3] <= 1.0).all()

    def test_identical_cameras_give_canonical_feature(self):
        pts = np.array([[0.0, 0.0, 2.0], [1.0, -1.0, 3.0]])
        c = np.array([0.0, 0.0, -1.0])
        feat = view_delta(pts, c, c)
        np.testing.assert_allclose(feat, [[0.0, 0.0, 0.0, 1.0]] * 2, atol=1e-14)

    def test_point_at_camera_center_rejected(self):
        pts = np.array([[0.0, 0.0, -4.0]])
        with pytest.raises(DomainError):
            view_delta(pts, np.array([0.0, 0.0, -4.0]), np.array([1.0, 0.0, 0.0]))

    def test_tensor_variant_matches_numpy(self):
        rng = np.random.default_rng(22)
        pts = rng.standard_normal((50, 3))
        src = np.array([0.0, 1.0, -3.0])
        tgt = np.array([-1.0, 0.0, -3.5])
        expect = view_delta(pts, src, tgt)
        got = view_delta_t(ad.Tensor(pts), src, tgt)
        np.testing.assert_allclose(got.data, expect, atol=1e-12)

    def test_tensor_variant_handles_degenerate_rows(self):
        src = np.array([0.0, 0.0, -4.0])
        pts = np.array([[0.0, 0.0, 2.0], [0.3, -0.2, 1.0]])
        got = view_delta_t(ad.Tensor(pts), src, src.copy())
        np.testing.assert_allclose(got.data, [[0.0, 0.0, 0.0, 1.0]] * 2, atol=1e-12)

    def test_tensor_variant_gradient(self):
        rng = np.random.default_rng(23)
        pts = rng.standard_normal((12, 3)) * 0.5
        src = np.array([0.0, 0.5, -3.0])
        tgt = np.array([0.8, -0.3, -2.5])
        w = rng.standard_normal((12, 4))
        t = ad.Tensor(pts.copy(), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.tsum(view_delta_t(t, src, tgt) * ad.Tensor(w))
            ad.backward(loss, tape)
        h = 1e-6
        fd = np.zeros_like(pts)
        for i in range(pts.shape[0]):
            for j in range(3):
                pp, pm = pts.copy(), pts.copy()
                pp[i, j] += h
                pm[i, j] -= h
                up = (view_delta_t(ad.Tensor(pp), src, tgt).data * w).sum()
                dn = (view_delta_t(ad.Tensor(pm), src, tgt).data * w).sum()
                fd[i, j] = (up - dn) / (2 * h)
        np.testing.assert_allclose(t.grad, fd, rtol=1e-4, atol=1e-6)


class TestIntrinsics:
    def test_scaled_halves_resolution(self):
        intr = Intrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)
        half = intr.scaled(0.5, 0.5)
        assert (half.width, half.height) == (32, 24)
        np.testing.assert_allclose([half.fx, half.fy], [50.0, 50.0])

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(DomainError):
            Intrinsics(0.0, 1.0, 0.0, 0.0, 4, 4)

    def test_pose_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            Pose(np.eye(4), np.zeros(3))
