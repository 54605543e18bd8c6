import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from flowins.exceptions import DegenerateGeometry, ProjectionError
from flowins.geometry import (CameraModel, camera_center, forward_camera, identity_quaternion,
                              project, projection_matrix, quat_conjugate, quat_from_axis_angle,
                              quat_from_matrix, quat_from_rate, quat_multiply, rotate_vector,
                              rotation_matrix, triangulate, triangulate_jacobian)

from conftest import pinhole, random_two_view


def random_quat(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def rodrigues(phi):
    th = np.linalg.norm(phi)
    if th == 0:
        return np.eye(3)
    k = phi / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * Kx @ Kx


# quaternions


def test_identity_is_neutral(rng):
    q = random_quat(rng)
    np.testing.assert_allclose(quat_multiply(identity_quaternion(), q), q, atol=1e-15)
    np.testing.assert_allclose(quat_multiply(q, identity_quaternion()), q, atol=1e-15)


def test_conjugate_is_inverse(rng):
    for _ in range(20):
        q = random_quat(rng)
        np.testing.assert_allclose(quat_multiply(q, quat_conjugate(q)), [1, 0, 0, 0], atol=1e-15)


def test_product_matches_matrix_product(rng):
    for _ in range(50):
        a, b = random_quat(rng), random_quat(rng)
        np.testing.assert_allclose(rotation_matrix(quat_multiply(a, b)),
                                   rotation_matrix(a) @ rotation_matrix(b), atol=1e-12)


def test_product_is_canonical_and_unit(rng):
    for _ in range(50):
        q = quat_multiply(random_quat(rng), random_quat(rng))
        assert q[0] >= 0
        assert abs(np.linalg.norm(q) - 1) < 1e-9


def test_multiply_rejects_non_unit():
    with pytest.raises(ValueError):
        quat_multiply([1, 0, 0, 0], [2, 0, 0, 0])


def test_zero_rate_gives_identity():
    np.testing.assert_array_equal(quat_from_rate(np.zeros(3), 0.3), [1, 0, 0, 0])


def test_half_turn_about_z():
    q = quat_from_rate([0, 0, np.pi], 1.0)
    np.testing.assert_allclose(np.abs(q), [0, 0, 0, 1], atol=1e-15)


def test_rate_matches_rodrigues(rng):
    for _ in range(100):
        w = rng.normal(size=3) * 2
        dt = rng.uniform(0.001, 1.0)
        v = rng.normal(size=3)
        np.testing.assert_allclose(rotate_vector(quat_from_rate(w, dt), v),
                                   rodrigues(w * dt) @ v, atol=1e-10)


def test_rate_composes_over_time(rng):
    for _ in range(50):
        w = rng.normal(size=3)
        t1, t2 = rng.uniform(0, 0.5, 2)
        np.testing.assert_allclose(quat_from_rate(w, t1 + t2),
                                   quat_multiply(quat_from_rate(w, t1), quat_from_rate(w, t2)),
                                   atol=1e-10)


def test_small_angle_branch_is_continuous():
    w = np.array([1e-9, -2e-9, 3e-9])
    q = quat_from_rate(w, 1.0)
    assert abs(np.linalg.norm(q) - 1) < 1e-15
    np.testing.assert_allclose(q[1:], w / 2, rtol=1e-6)


def test_negative_dt_rejected():
    with pytest.raises(ValueError):
        quat_from_rate([0, 0, 1], -0.1)


def test_rotate_identity_and_axis_permutation(rng):
    v = rng.normal(size=3)
    np.testing.assert_allclose(rotate_vector([1, 0, 0, 0], v), v, atol=0)
    q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    np.testing.assert_allclose(rotate_vector(q, [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_rotate_matches_matrix(rng):
    for _ in range(100):
        q, v = random_quat(rng), rng.normal(size=3)
        np.testing.assert_allclose(rotate_vector(q, v), rotation_matrix(q) @ v, atol=1e-12)


def test_rotation_matrix_matches_scipy(rng):
    for _ in range(20):
        q = random_quat(rng)
        R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        np.testing.assert_allclose(rotation_matrix(q), R, atol=1e-12)


def test_matrix_round_trip(rng):
    for _ in range(100):
        q = random_quat(rng)
        np.testing.assert_allclose(quat_from_matrix(rotation_matrix(q)), q, atol=1e-12)


# camera and projection


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(-1.0, 500.0, 10.0, 10.0)
    with pytest.raises(ValueError):
        CameraModel(500.0, 500.0, 600.0, 10.0)
    with pytest.raises(ValueError):
        CameraModel(500.0, 500.0, 10.0, 10.0, R_imu_cam=np.diag([1.0, 1.0, -1.0]))


def test_forward_camera_defaults():
    cam = forward_camera()
    assert (cam.image_width, cam.image_height) == (512, 683)
    # optical axis points forward and slightly down in the body frame
    z = cam.R_imu_cam[:, 2]
    assert z[0] > 0.98 and z[2] < 0
    np.testing.assert_allclose(np.rad2deg(np.arcsin(-z[2])), 10.0)


def test_principal_point():
    K = np.array([[500.0, 0, 250.0], [0, 480.0, 330.0], [0, 0, 1]])
    P = np.hstack([K, np.zeros((3, 1))])
    np.testing.assert_allclose(project(P, [0, 0, 1]), [250.0, 330.0])


def test_point_behind_camera_rejected():
    P = np.hstack([np.eye(3), np.zeros((3, 1))])
    with pytest.raises(ProjectionError):
        project(P, [0, 0, -1])
    with pytest.raises(ProjectionError):
        project(P, [0, 0, 1, 0])


def test_backprojected_ray_contains_point(rng):
    for _ in range(100):
        P1, _, X = random_two_view(rng)
        u = project(P1, X)
        M = P1[:, :3]
        c = camera_center(P1)
        ray = np.linalg.solve(M, np.r_[u, 1.0])
        ray /= np.linalg.norm(ray)
        d = X - c
        assert np.linalg.norm(d - (d @ ray) * ray) < 1e-9


def test_projection_matrix_composes_extrinsics(rng, lever_camera):
    cam = lever_camera
    for _ in range(20):
        p, q = rng.normal(size=3), random_quat(rng)
        Rwb = rotation_matrix(q)
        Rwc = Rwb @ cam.R_imu_cam
        c = p + Rwb @ cam.t_imu_cam
        np.testing.assert_allclose(projection_matrix(p, q, cam), pinhole(cam.K, Rwc, c),
                                   atol=1e-10)


# triangulation


def test_known_point_recovered():
    K = np.array([[500.0, 0, 255.5], [0, 500.0, 341.0], [0, 0, 1]])
    X = np.array([2.0, -1.0, 5.0])
    P1 = np.hstack([K, np.zeros((3, 1))])
    P2 = pinhole(K, np.eye(3), np.array([0.5, 0.0, 0.0]))
    est, rep = triangulate(P1, P2, project(P1, X), project(P2, X))
    assert np.linalg.norm(est - X) < 1e-8
    assert rep.ratio > 10 and rep.baseline == pytest.approx(0.5)


def test_round_trip_random(rng):
    for _ in range(200):
        P1, P2, X = random_two_view(rng)
        est, _ = triangulate(P1, P2, project(P1, X), project(P2, X))
        assert np.linalg.norm(est - X) < 1e-8


def test_identical_poses_degenerate():
    P = np.hstack([np.eye(3), np.zeros((3, 1))])
    with pytest.raises(DegenerateGeometry):
        triangulate(P, P, [0.1, 0.2], [0.1, 0.2])


def test_point_on_baseline_degenerate():
    K = np.eye(3)
    R = np.eye(3)
    c1, c2 = np.zeros(3), np.array([0.0, 0.0, 2.0])
    P1, P2 = pinhole(K, R, c1), pinhole(K, R, c2)
    # a point ahead of both cameras on the line through their centres
    X = np.array([0.0, 0.0, 5.0])
    with pytest.raises(DegenerateGeometry) as info:
        triangulate(P1, P2, project(P1, X), project(P2, X))
    assert info.value.report.ratio < 10


def test_invariant_to_pixel_scaling(rng):
    """Scaling image coordinates (and K with them) leaves the point unchanged."""
    P1, P2, X = random_two_view(rng)
    S = np.diag([3.0, 3.0, 1.0])
    a, _ = triangulate(P1, P2, project(P1, X), project(P2, X))
    b, _ = triangulate(S @ P1, S @ P2, project(S @ P1, X), project(S @ P2, X))
    np.testing.assert_allclose(a, b, atol=1e-9)


def _fd_triangulation(P1, P2, x1, x2, h=1e-6):
    z = np.r_[P1.ravel(), P2.ravel(), x1, x2]

    def f(z):
        return triangulate(z[:12].reshape(3, 4), z[12:24].reshape(3, 4), z[24:26], z[26:28])[0]

    J = np.empty((3, 28))
    for i in range(28):
        e = np.zeros(28)
        e[i] = h
        J[:, i] = (f(z + e) - f(z - e)) / (2 * h)
    return J


def test_triangulation_jacobian_matches_finite_differences(rng):
    for _ in range(20):
        P1, P2, X = random_two_view(rng)
        x1, x2 = project(P1, X), project(P2, X)
        pt, J = triangulate_jacobian(P1, P2, x1, x2)
        np.testing.assert_allclose(pt, X, atol=1e-8)
        Jfd = _fd_triangulation(P1, P2, x1, x2)
        assert np.linalg.norm(J - Jfd) <= 1e-4 * np.linalg.norm(Jfd)


def test_common_translation_derivative_is_identity(rng):
    """Moving both cameras and the point together moves the estimate equally."""
    P1, P2, X = random_two_view(rng)
    x1, x2 = project(P1, X), project(P2, X)
    _, J = triangulate_jacobian(P1, P2, x1, x2)
    # translating the world by d changes P[:, 3] by -P[:, :3] @ d
    D = np.zeros((28, 3))
    for P, off in ((P1, 0), (P2, 12)):
        for r in range(3):
            D[off + 4 * r + 3] = -P[r, :3]
    np.testing.assert_allclose(J @ D, np.eye(3), atol=1e-6)
