import numpy as np
import pytest

from flowins.exceptions import DegenerateGeometry
from flowins.flow_fusion import (ACCEPTED, NUGGET, POSE_EQUALITY, FlowField, FlowPoint,
                                 GatingConfig, augment_pose, camera_matrices,
                                 ekf_update_flow_point, flow_jacobians, flow_residual,
                                 forget_pose, frame_pair_cycle, process_flow_field,
                                 select_points)
from flowins.geometry import CameraModel, project, rotation_matrix
from flowins.ins import (CORE_DIM, STATE_DIM, ImuSample, ProcessNoiseConfig, StateEstimate,
                         StatePrior, check_covariance, ekf_predict, initial_state)
from flowins.pipeline import AblationConfig, run_filter
from flowins.simulator import NoiseSpec, TrajectorySpec, simulate_dataset

from test_ins import random_state


def state_for_pair(ds, j, prior=StatePrior(sigma_p=0.05, sigma_v=0.05, sigma_att=1e-3)):
    """Filter state at the end of frame pair ``j``, started on the truth at its first frame."""
    tr = ds.truth
    k1, k2 = tr.frame_idx[j], tr.frame_idx[j + 1]
    dt = tr.t[k1 + 1] - tr.t[k1]
    # forward-difference velocity reproduces the sampled positions exactly
    v = (tr.p[k1 + 1] - tr.p[k1]) / dt
    x = initial_state(tr.p[k1], v, tr.q[k1], prior)
    cfg = ProcessNoiseConfig()
    for k in range(k1 + 1, k2 + 1):
        x = ekf_predict(x, ds.imu[k], tr.t[k] - tr.t[k - 1], cfg)
    return x


def random_cov(rng, scale=0.1):
    A = rng.normal(size=(STATE_DIM, STATE_DIM)) * scale
    return A @ A.T + 1e-3 * np.eye(STATE_DIM)


# camera matrices


def test_same_pose_gives_same_matrix(rng):
    cam = CameraModel(500.0, 500.0, 255.5, 341.0)
    m = random_state(rng)
    m[19:22], m[22:26] = m[0:3], m[6:10]
    P1, P2 = camera_matrices(m, cam)
    np.testing.assert_array_equal(P1, P2)


def test_translation_column():
    cam = CameraModel(500.0, 480.0, 255.5, 341.0)
    x = StateEstimate.from_components(p=[1.0, 0.0, 0.0])
    _, P2 = camera_matrices(x, cam)
    np.testing.assert_allclose(P2[:, 3], -cam.K @ np.array([1.0, 0.0, 0.0]))


def test_projection_matches_explicit_composition(rng, lever_camera):
    cam = lever_camera
    X = np.array([3.0, -2.0, 7.0])
    for _ in range(20):
        m = random_state(rng)
        _, P2 = camera_matrices(m, cam)
        Rwb = rotation_matrix(m[6:10])
        Xc = cam.R_imu_cam.T @ (Rwb.T @ (X - m[0:3]) - cam.t_imu_cam)
        y = cam.K @ Xc
        np.testing.assert_allclose(P2 @ np.r_[X, 1.0], y, rtol=1e-12, atol=1e-12)


# residual and Jacobians


def test_residual_vanishes_at_truth(clean_dataset):
    ds = clean_dataset
    tr = ds.truth
    for j in (5, 30, 60):
        k1, k2 = tr.frame_idx[j], tr.frame_idx[j + 1]
        x = StateEstimate.from_components(p=tr.p[k2], q=tr.q[k2], p_minus=tr.p[k1],
                                          q_minus=tr.q[k1])
        for fp in ds.frames[j].points[:40]:
            h, _ = flow_residual(x, fp, ds.camera)
            assert np.abs(h).max() < 1e-8


def test_zero_motion_is_degenerate():
    cam = CameraModel(500.0, 500.0, 255.5, 341.0)
    x = StateEstimate.from_components(p=[1.0, 2.0, 0.0])
    with pytest.raises(DegenerateGeometry):
        flow_residual(x, FlowPoint(100.0, 200.0, 0.0, 0.0, 1.0, 1.0), cam)


def test_residual_grows_with_position_error(clean_dataset):
    ds = clean_dataset
    tr = ds.truth
    j = 40
    k1, k2 = tr.frame_idx[j], tr.frame_idx[j + 1]
    fp = ds.frames[j].points[len(ds.frames[j]) // 2]
    # perturb across the direction of travel so the epipolar geometry changes
    d = np.cross(tr.v[k2], [0.0, 0.0, 1.0])
    d /= np.linalg.norm(d)
    norms = []
    for eps in (0.0, 0.01, 0.02, 0.05, 0.1):
        x = StateEstimate.from_components(p=tr.p[k2] + eps * d, q=tr.q[k2], p_minus=tr.p[k1],
                                          q_minus=tr.q[k1])
        norms.append(np.linalg.norm(flow_residual(x, fp, ds.camera)[0]))
    assert norms[-1] > 0
    assert np.all(np.diff(norms) > 0)


def test_parallax_matches_infinite_homography(short_dataset):
    ds = short_dataset
    tr = ds.truth
    j = 20
    k1, k2 = tr.frame_idx[j], tr.frame_idx[j + 1]
    x = StateEstimate.from_components(p=tr.p[k2], q=tr.q[k2], p_minus=tr.p[k1], q_minus=tr.q[k1])
    P1, P2 = camera_matrices(x, ds.camera)
    H = P2[:, :3] @ np.linalg.inv(P1[:, :3])
    for fp in ds.frames[j].points[:10]:
        _, info = flow_residual(x, fp, ds.camera)
        y = H @ np.r_[fp[0], fp[1], 1.0]
        assert info.parallax == pytest.approx(np.linalg.norm(fp[:2] + fp[2:4] - y[:2] / y[2]),
                                              rel=1e-9)


def test_measurement_jacobians_match_finite_differences(short_dataset):
    ds = short_dataset
    tr = ds.truth
    h = 1e-6
    count = 0
    for j in range(5, 250, 25):
        k1, k2 = tr.frame_idx[j], tr.frame_idx[j + 1]
        x = StateEstimate.from_components(p=tr.p[k2], q=tr.q[k2], p_minus=tr.p[k1],
                                          q_minus=tr.q[k1])
        for fp in ds.frames[j].points[::max(len(ds.frames[j]) // 10, 1)][:10]:
            try:
                _, Hx, Hr = flow_jacobians(x, fp, ds.camera)
            except DegenerateGeometry:
                continue
            Hxd = np.empty((2, STATE_DIM))
            for i in range(STATE_DIM):
                e = np.zeros(STATE_DIM)
                e[i] = h
                Hxd[:, i] = (flow_residual(x.mean + e, fp, ds.camera)[0]
                             - flow_residual(x.mean - e, fp, ds.camera)[0]) / (2 * h)
            Hrd = np.empty((2, 2))
            for i in range(2):
                e = np.zeros(6)
                e[2 + i] = h
                Hrd[:, i] = (flow_residual(x, fp + e, ds.camera)[0]
                             - flow_residual(x, fp - e, ds.camera)[0]) / (2 * h)
            assert np.linalg.norm(Hx - Hxd) <= 1e-4 * np.linalg.norm(Hxd)
            assert np.linalg.norm(Hr - Hrd) <= 1e-4 * np.linalg.norm(Hrd)
            count += 1
    assert count >= 50


# single-point update


def test_uninformative_point_leaves_state(short_dataset):
    x = state_for_pair(short_dataset, 30)
    fp = short_dataset.frames[30].points[0].copy()
    fp[4:6] = 1e12
    y, rep = ekf_update_flow_point(x, fp, short_dataset.camera,
                                   GatingConfig(min_parallax_sigmas=0.0))
    assert rep.accepted
    np.testing.assert_allclose(y.mean, x.mean, rtol=1e-9, atol=1e-9 * np.abs(x.mean).max())
    np.testing.assert_allclose(y.cov, x.cov, rtol=1e-9, atol=1e-9 * np.abs(x.cov).max())


def test_corrupted_point_is_rejected(short_dataset):
    ds = short_dataset
    x = state_for_pair(ds, 30)
    rejected = 0
    pts = ds.frames[30].points[:20]
    for fp in pts:
        fp = fp.copy()
        fp[4:6] = 1.0
        ok, _ = ekf_update_flow_point(x, fp, ds.camera)
        fp[3] += 50.0
        _, rep = ekf_update_flow_point(x, fp, ds.camera)
        rejected += not rep.accepted
    assert rejected == len(pts)


def test_accepted_update_keeps_covariance_healthy(short_dataset):
    ds = short_dataset
    x = state_for_pair(ds, 12)
    n = 0
    for fp in ds.frames[12].points[:30]:
        x, rep = ekf_update_flow_point(x, fp, ds.camera)
        if rep.accepted:
            check_covariance(x.cov)
            n += 1
    assert n > 0


# whole fields


def test_empty_field_leaves_state(short_dataset):
    x = state_for_pair(short_dataset, 3)
    empty = FlowField(0.0, 0.1, 512, 683, np.zeros((0, 6)))
    y, rep = process_flow_field(x, empty, short_dataset.camera)
    assert y is x and rep.accepted == 0 and rep.n_used == 0


def test_all_gated_leaves_state(short_dataset):
    x = state_for_pair(short_dataset, 3)
    y, rep = process_flow_field(x, short_dataset.frames[3], short_dataset.camera,
                                GatingConfig(chi2_threshold=1e-300))
    assert y is x
    assert rep.accepted == 0 and rep.gated > 0


def test_selection_is_deterministic_and_capped():
    rng = np.random.default_rng(0)
    du = rng.normal(size=(40, 50))
    fld = FlowField.from_dense(du, du, np.ones_like(du), np.ones_like(du), 0.0, 0.1)
    gate = GatingConfig(max_points_per_update=100, subsample_stride=4)
    a = select_points(fld, gate)
    np.testing.assert_array_equal(a, select_points(fld, gate))
    assert len(a) == 100
    assert np.all(np.diff(a) > 0)
    u, v = fld.points[a, 0], fld.points[a, 1]
    assert np.all(u % 4 == 0) and np.all(v % 4 == 0)
    assert len(select_points(fld, GatingConfig())) <= 200


def test_inlier_acceptance_rate(short_dataset):
    res = run_filter(short_dataset, AblationConfig(use_dense_flow=True))
    acc = sum(r.accepted for r in res.field_reports)
    gated = sum(r.gated for r in res.field_reports)
    assert acc / (acc + gated) >= 0.9


def test_updates_reduce_position_error():
    ds = simulate_dataset(TrajectorySpec(duration=60.0), NoiseSpec(seed=2))
    tr = ds.truth
    before = {}
    pairs = []

    def monitor(t, tag, m, P):
        k = int(round(t * 100))
        if tag == "imu":
            before["m"] = m.copy()
        elif tag == "flow":
            pairs.append((np.linalg.norm(before["m"][:3] - tr.p[k]),
                          np.linalg.norm(m[:3] - tr.p[k])))

    run_filter(ds, AblationConfig(use_dense_flow=True), monitor=monitor)
    pairs = np.array(pairs)
    assert np.mean(pairs[:, 1] < pairs[:, 0]) >= 0.8


# pose bookkeeping


def test_forget_resets_past_pose(rng):
    x = StateEstimate(random_state(rng), random_cov(rng))
    y = forget_pose(x, 1e3, 1e1)
    np.testing.assert_array_equal(y.p_minus, 0)
    np.testing.assert_array_equal(y.q_minus, 0)
    expect = np.diag(np.r_[np.full(3, 1e6), np.full(4, 1e2)])
    np.testing.assert_array_equal(y.cov[CORE_DIM:, CORE_DIM:], expect)
    np.testing.assert_array_equal(y.cov[:CORE_DIM, CORE_DIM:], 0)
    np.testing.assert_array_equal(y.cov[:CORE_DIM, :CORE_DIM], x.cov[:CORE_DIM, :CORE_DIM])


def test_augment_copies_pose(rng):
    for _ in range(20):
        x = StateEstimate(random_state(rng), random_cov(rng))
        y = augment_pose(forget_pose(x))
        assert np.linalg.norm(y.p_minus - y.p) <= 1e-6 * (1 + np.linalg.norm(y.p))
        dq = min(np.linalg.norm(y.q_minus - y.q), np.linalg.norm(y.q_minus + y.q))
        assert dq <= 1e-6
        assert np.abs(y.cov[19:22, 19:22] - y.cov[0:3, 0:3]).max() <= 10 * NUGGET
        assert np.abs(y.cov[:CORE_DIM, :CORE_DIM] - x.cov[:CORE_DIM, :CORE_DIM]).max() \
            <= 10 * NUGGET
        check_covariance(y.cov)


def test_pose_equality_matrix():
    m = random_state(np.random.default_rng(4))
    m[19:22], m[22:26] = m[0:3], m[6:10]
    np.testing.assert_array_equal(POSE_EQUALITY @ m, 0)


def test_augment_aligns_quaternion_sign(rng):
    x = StateEstimate(random_state(rng), random_cov(rng))
    x.mean[22:26] = -x.mean[6:10]
    y = augment_pose(x)
    assert y.q_minus @ y.q > 0


def test_empty_cycles_keep_marginal(rng, short_dataset):
    x = state_for_pair(short_dataset, 8)
    empty = FlowField(0.0, 0.1, 512, 683, np.zeros((0, 6)))
    y = x
    for _ in range(2):
        y, _ = frame_pair_cycle(y, empty, short_dataset.camera)
    assert np.abs(y.cov[:CORE_DIM, :CORE_DIM] - x.cov[:CORE_DIM, :CORE_DIM]).max() <= 10 * NUGGET
    np.testing.assert_allclose(y.mean[:CORE_DIM], x.mean[:CORE_DIM], atol=1e-12)


def test_gating_config_validation():
    with pytest.raises(ValueError):
        GatingConfig(measurement="diagonal")
    with pytest.raises(ValueError):
        GatingConfig(chi2_threshold=-1.0)
    with pytest.raises(ValueError):
        GatingConfig(min_parallax_sigmas=-1.0)
    assert GatingConfig().threshold == pytest.approx(3.841, abs=1e-3)
    assert GatingConfig(measurement="full").threshold == pytest.approx(5.991, abs=1e-3)


def test_flow_point_validation():
    with pytest.raises(ValueError):
        FlowPoint(0, 0, 1, 1, 0.0, 1.0)
    with pytest.raises(ValueError):
        FlowField(1.0, 1.0, 10, 10, np.zeros((0, 6)))
