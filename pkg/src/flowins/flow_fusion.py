"""Optical-flow measurement updates and pose-pair bookkeeping.

Each flow point is triangulated from the two camera poses held in the state
(current pose and the augmented past pose) and reprojected; the residual is
the difference between the reprojected displacement and the observed flow.

The residual only carries information across the epipolar line, so its 2x2
innovation covariance is close to rank one.  The default ``"projected"``
update therefore uses the residual component along the dominant eigenvector
of the innovation covariance (a 1-dof chi-square test); ``"full"`` uses the
2-vector as is.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numba import njit

from .exceptions import DegenerateGeometry, SingularInnovation
from .geometry import (BAD_BASELINE, BAD_CONDITIONING, BAD_DEPTH, BASELINE_EPS,
                       DEGENERACY_RATIO, DEPTH_EPS, OK, TriangulationReport,
                       _camera_projection, _rot_apply_jac, _rotmat, _sv_ratio,
                       _tri_core, _tri_jac)
from .ins import CORE_DIM, PM_SLICE, Q_SLICE, QM_SLICE, P_SLICE, STATE_DIM, StateEstimate

SIGMA_P0 = 1e6
SIGMA_Q0 = 1e6
NUGGET = 1e-12

CHI2_1DOF_95 = 3.841
CHI2_2DOF_95 = 5.991

# update outcomes
ACCEPTED = 0
GATED = 1
SINGULAR = 2
DEGENERATE = 3  # any geometry failure; detail in the geometry status code

LOW_PARALLAX = 4

_GEOMETRY_NAMES = {BAD_BASELINE: "baseline", BAD_CONDITIONING: "conditioning",
                   BAD_DEPTH: "depth", LOW_PARALLAX: "parallax"}


class Provenance(str, Enum):
    DENSE_NETWORK = "dense_network"
    SPARSE_SUBSAMPLE = "sparse_subsample"
    SYNTHETIC = "synthetic"


@dataclass
class FlowPoint:
    u1: float
    v1: float
    du: float
    dv: float
    var_du: float
    var_dv: float

    def __post_init__(self):
        if not (self.var_du > 0 and self.var_dv > 0):
            raise ValueError("flow variances must be positive")

    def as_array(self):
        return np.array([self.u1, self.v1, self.du, self.dv, self.var_du, self.var_dv])


@dataclass
class FlowField:
    """Flow for one frame pair.

    ``points`` is an (N, 6) array of ``u1, v1, du, dv, var_du, var_dv``.
    Dense fields hold one row per pixel in row-major order and set
    ``dense=True``.  ``outlier`` is an optional ground-truth mask written by
    the simulator; the filter never reads it.
    """

    t1: float
    t2: float
    width: int
    height: int
    points: np.ndarray
    provenance: Provenance = Provenance.SYNTHETIC
    dense: bool = False
    outlier: np.ndarray = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float).reshape(-1, 6)
        self.provenance = Provenance(self.provenance)
        if not self.t2 > self.t1:
            raise ValueError("flow field needs t2 > t1")
        if self.dense and len(self.points) != self.width * self.height:
            raise ValueError("dense field must have width * height points")
        if self.outlier is not None:
            self.outlier = np.asarray(self.outlier, dtype=bool).reshape(len(self.points))

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_dense(cls, du, dv, var_du, var_dv, t1, t2, provenance=Provenance.DENSE_NETWORK):
        du = np.asarray(du, dtype=float)
        h, w = du.shape
        vv, uu = np.mgrid[0:h, 0:w]
        pts = np.column_stack([uu.ravel(), vv.ravel(), du.ravel(), np.ravel(dv),
                               np.ravel(var_du), np.ravel(var_dv)])
        return cls(t1, t2, w, h, pts, provenance, dense=True)

    def planes(self):
        """Dense planes ``(du, dv, var_du, var_dv)``, each (height, width)."""
        if not self.dense:
            raise ValueError("field is not dense")
        return tuple(self.points[:, k].reshape(self.height, self.width) for k in range(2, 6))

    def check(self):
        u, v = self.points[:, 0], self.points[:, 1]
        if np.any((u < 0) | (u >= self.width) | (v < 0) | (v >= self.height)):
            raise ValueError("flow point outside the image")
        if np.any(self.points[:, 4:6] <= 0):
            raise ValueError("flow variances must be positive")
        return self


@dataclass
class GatingConfig:
    """Measurement-selection settings.

    ``chi2_threshold=None`` picks the 95% quantile for the measurement mode
    (1 dof for ``"projected"``, 2 dof for ``"full"``).  ``min_depth`` and
    ``max_depth`` bound the triangulated depth in both views.
    ``min_parallax_sigmas`` drops points whose parallax (distance from the
    rotation-only correspondence) is below that many flow standard
    deviations.
    """

    chi2_threshold: float = None
    max_points_per_update: int = 120
    subsample_stride: int = 1
    measurement: str = "projected"
    min_depth: float = 1.0
    max_depth: float = np.inf
    min_parallax_sigmas: float = 4.0

    def __post_init__(self):
        if self.min_parallax_sigmas < 0:
            raise ValueError("min_parallax_sigmas must be non-negative")
        if self.measurement not in ("projected", "full"):
            raise ValueError("measurement must be 'projected' or 'full'")
        if self.chi2_threshold is not None and not self.chi2_threshold > 0:
            raise ValueError("chi2_threshold must be positive")
        if self.subsample_stride < 1 or self.max_points_per_update < 1:
            raise ValueError("stride and point budget must be at least 1")

    @property
    def threshold(self):
        if self.chi2_threshold is not None:
            return float(self.chi2_threshold)
        return CHI2_1DOF_95 if self.measurement == "projected" else CHI2_2DOF_95


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _pi_jac(y):
    J = np.zeros((2, 3))
    J[0, 0] = 1.0 / y[2]
    J[1, 1] = 1.0 / y[2]
    J[0, 2] = -y[0] / (y[2] * y[2])
    J[1, 2] = -y[1] / (y[2] * y[2])
    return J


@njit(cache=True)
def _normalized_projection(P, dP, col0, Tinv, c1, b, dc1, db):
    """``P @ Tinv`` and its derivative over the 14 pose parameters.

    ``dP`` (12, 7) covers the camera's own pose, stored from ``col0``.
    """
    Pn = P @ Tinv
    dPn = np.zeros((12, 14))
    for r in range(3):
        for c in range(3):
            row = 4 * r + c
            for k in range(14):
                dPn[row, k] = P[r, c] * db[k]
            for k in range(7):
                dPn[row, col0 + k] += b * dP[row, k]
        row = 4 * r + 3
        for k in range(14):
            dPn[row, k] = P[r, 0] * dc1[0, k] + P[r, 1] * dc1[1, k] + P[r, 2] * dc1[2, k]
        for k in range(7):
            dPn[row, col0 + k] += (dP[4 * r, k] * c1[0] + dP[4 * r + 1, k] * c1[1]
                                   + dP[4 * r + 2, k] * c1[2] + dP[row, k])
    return Pn, dPn


@njit(cache=True)
def _parallax(K, R_ic, R1, R2, u1, v1, du, dv):
    """Distance of the observed end point from the image of the first ray at infinity."""
    # K is upper triangular
    z = np.empty(3)
    z[2] = 1.0
    z[1] = (v1 - K[1, 2]) / K[1, 1]
    z[0] = (u1 - K[0, 2] - K[0, 1] * z[1]) / K[0, 0]
    # camera axes in the IMU frame are the columns of R_ic
    a = np.zeros(3)
    for i in range(3):
        for j in range(3):
            a[i] += R_ic[i, j] * z[j]
    b = np.zeros(3)
    for i in range(3):
        for j in range(3):
            b[i] += R1[i, j] * a[j]
    for i in range(3):
        a[i] = 0.0
        for j in range(3):
            a[i] += R2[j, i] * b[j]
    for i in range(3):
        b[i] = 0.0
        for j in range(3):
            b[i] += R_ic[j, i] * a[j]
    y = np.zeros(3)
    for i in range(3):
        for j in range(3):
            y[i] += K[i, j] * b[j]
    if y[2] <= 0:
        return np.inf
    return np.hypot(u1 + du - y[0] / y[2], v1 + dv - y[1] / y[2])


@njit(cache=True)
def _flow_point(m, K, R_ic, t_ic, u1, v1, du, dv, min_depth, max_depth, min_parallax):
    """Residual and Jacobians for one flow point.

    The point is triangulated in world coordinates re-expressed about the
    first camera centre and divided by the baseline, which makes the
    residual exactly invariant to a common translation, rotation or scaling
    of both poses.  Returns ``status, h (2), Hx (2, 26), Hr (2, 2),
    point (3), parallax``.
    """
    h = np.zeros(2)
    Hx = np.zeros((2, 26))
    Hr = np.zeros((2, 2))
    pt = np.zeros(3)
    p2 = m[0:3].copy()
    q2 = m[6:10].copy()
    p1 = m[19:22].copy()
    q1 = m[22:26].copy()
    R1 = _rotmat(q1)
    R2 = _rotmat(q2)
    # parallax: distance of x2 from the image of the first ray's point at infinity
    parallax = _parallax(K, R_ic, R1, R2, u1, v1, du, dv)
    if parallax < min_parallax:
        return LOW_PARALLAX, h, Hx, Hr, pt, parallax
    c1 = p1 + R1 @ t_ic
    c2 = p2 + R2 @ t_ic
    d = c2 - c1
    b = np.sqrt(d @ d)
    if b < 1e-4:
        return BAD_BASELINE, h, Hx, Hr, pt, parallax
    # parameter order: p, q, p_minus, q_minus
    dc1 = np.zeros((3, 14))
    dc2 = np.zeros((3, 14))
    dc1[:, 10:14] = _rot_apply_jac(q1, t_ic)
    dc2[:, 3:7] = _rot_apply_jac(q2, t_ic)
    for i in range(3):
        dc1[i, 7 + i] = 1.0
        dc2[i, i] = 1.0
    db = (d @ (dc2 - dc1)) / b
    Tinv = np.eye(4)
    for i in range(3):
        Tinv[i, i] = b
        Tinv[i, 3] = c1[i]
    P1, dP1 = _camera_projection(p1, q1, K, R_ic, t_ic)
    P2, dP2 = _camera_projection(p2, q2, K, R_ic, t_ic)
    N1, dN1 = _normalized_projection(P1, dP1, 7, Tinv, c1, b, dc1, db)
    N2, dN2 = _normalized_projection(P2, dP2, 0, Tinv, c1, b, dc1, db)
    x1 = np.array([u1, v1])
    x2 = np.array([u1 + du, v1 + dv])
    B, nrm, s, V, X = _tri_core(N1, N2, x1, x2)
    ratio = _sv_ratio(s)
    if ratio < 10.0 or abs(X[3]) < 1e-12:
        return BAD_CONDITIONING, h, Hx, Hr, pt, parallax
    ptn, J = _tri_jac(N1, N2, x1, x2, B, nrm, s, V, X)
    pt = c1 + b * ptn
    Xh = np.ones(4)
    Xh[:3] = ptn
    y1 = N1 @ Xh
    y2 = N2 @ Xh
    lo = max(min_depth, 1e-6)
    if y1[2] <= lo or y2[2] <= lo or y1[2] > max_depth or y2[2] > max_depth:
        return BAD_DEPTH, h, Hx, Hr, pt, parallax
    h[0] = y2[0] / y2[2] - y1[0] / y1[2] - du
    h[1] = y2[1] / y2[2] - y1[1] / y1[2] - dv

    J1 = _pi_jac(y1)
    J2 = _pi_jac(y2)
    G = J2 @ np.ascontiguousarray(N2[:, :3]) - J1 @ np.ascontiguousarray(N1[:, :3])
    GJ = G @ J            # (2, 28)
    dh1 = GJ[:, 0:12].copy()
    dh2 = GJ[:, 12:24].copy()
    for r in range(3):
        for c in range(4):
            for i in range(2):
                dh1[i, 4 * r + c] -= J1[i, r] * Xh[c]
                dh2[i, 4 * r + c] += J2[i, r] * Xh[c]
    Hr[:, 0] = GJ[:, 26]
    Hr[:, 1] = GJ[:, 27]
    Hr[0, 0] -= 1.0
    Hr[1, 1] -= 1.0
    D = dh1 @ dN1 + dh2 @ dN2
    Hx[:, 0:3] = D[:, 0:3]
    Hx[:, 6:10] = D[:, 3:7]
    Hx[:, 19:22] = D[:, 7:10]
    Hx[:, 22:26] = D[:, 10:14]
    return OK, h, Hx, Hr, pt, parallax


@njit(cache=True)
def _joseph(P, K, H, Rm):
    """(I - K H) P (I - K H)^T + K Rm K^T, evaluated in O(n^2 m)."""
    DP = P - K @ (H @ P)
    out = DP - (DP @ H.T) @ K.T + K @ Rm @ K.T
    return 0.5 * (out + out.T)


@njit(cache=True)
def _normalize_quats(m):
    for a in (6, 22):
        n = np.sqrt(m[a] ** 2 + m[a + 1] ** 2 + m[a + 2] ** 2 + m[a + 3] ** 2)
        if n > 0:
            for k in range(4):
                m[a + k] /= n


@njit(cache=True)
def _kalman_flow(m, P, h, Hx, Hr, var_du, var_dv, threshold, projected):
    """Gate and apply one flow update.  Returns status, nis, m, P, S."""
    Rr = np.zeros((2, 2))
    Rr[0, 0] = var_du
    Rr[1, 1] = var_dv
    Rm = Hr @ Rr @ Hr.T
    PHt = P @ Hx.T
    S = Hx @ PHt + Rm
    S = 0.5 * (S + S.T)
    v = -h
    if projected:
        a = S[0, 0]
        b = S[0, 1]
        c = S[1, 1]
        lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        if not np.isfinite(lam) or lam <= 0:
            return SINGULAR, np.inf, m, P, S
        if abs(b) > 1e-300:
            d0, d1 = b, lam - a
        elif a >= c:
            d0, d1 = 1.0, 0.0
        else:
            d0, d1 = 0.0, 1.0
        nd = np.sqrt(d0 * d0 + d1 * d1)
        d0 /= nd
        d1 /= nd
        y = d0 * v[0] + d1 * v[1]
        H = np.empty((1, 26))
        H[0] = d0 * Hx[0] + d1 * Hx[1]
        rs = d0 * d0 * Rm[0, 0] + 2 * d0 * d1 * Rm[0, 1] + d1 * d1 * Rm[1, 1]
        s = (H @ P @ H.T)[0, 0] + rs
        if not s > 0:
            return SINGULAR, np.inf, m, P, S
        nis = y * y / s
        if nis > threshold:
            return GATED, nis, m, P, S
        K = (P @ H.T) / s
        mn = m + K[:, 0] * y
        Rs = np.empty((1, 1))
        Rs[0, 0] = rs
        Pn = _joseph(P, K, H, Rs)
    else:
        det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
        scale = S[0, 0] * S[1, 1]
        if not np.isfinite(det) or det <= 1e-14 * scale or scale <= 0:
            return SINGULAR, np.inf, m, P, S
        Si = np.empty((2, 2))
        Si[0, 0] = S[1, 1] / det
        Si[1, 1] = S[0, 0] / det
        Si[0, 1] = -S[0, 1] / det
        Si[1, 0] = -S[1, 0] / det
        nis = v @ Si @ v
        if nis > threshold:
            return GATED, nis, m, P, S
        K = PHt @ Si
        mn = m + K @ v
        Pn = _joseph(P, K, Hx, Rm)
    _normalize_quats(mn)
    return ACCEPTED, nis, mn, Pn, S


@njit(cache=True)
def _process_points(m, P, pts, K, R_ic, t_ic, threshold, projected, min_depth, max_depth,
                    parallax_sigmas):
    n = pts.shape[0]
    status = np.empty(n, dtype=np.int64)
    geo = np.zeros(n, dtype=np.int64)
    nis = np.full(n, np.nan)
    for i in range(n):
        lo = parallax_sigmas * np.sqrt(max(pts[i, 4], pts[i, 5]))
        g, h, Hx, Hr, pt, par = _flow_point(m, K, R_ic, t_ic, pts[i, 0], pts[i, 1],
                                            pts[i, 2], pts[i, 3], min_depth, max_depth, lo)
        geo[i] = g
        if g != OK:
            status[i] = DEGENERATE
            continue
        st, e, mn, Pn, S = _kalman_flow(m, P, h, Hx, Hr, pts[i, 4], pts[i, 5],
                                        threshold, projected)
        status[i] = st
        nis[i] = e
        if st == SINGULAR:
            return m, P, status[:i + 1], geo[:i + 1], nis[:i + 1]
        if st == ACCEPTED:
            m = mn
            P = Pn
    return m, P, status, geo, nis


# --------------------------------------------------------------------------
# public API


def camera_matrices(x, cam):
    """Projection matrices of the past pose (P1) and the current pose (P2)."""
    m = x.mean if isinstance(x, StateEstimate) else np.asarray(x, dtype=float)
    P1, _ = _camera_projection(m[PM_SLICE].copy(), m[QM_SLICE].copy(), cam.K,
                               cam.R_imu_cam, cam.t_imu_cam)
    P2, _ = _camera_projection(m[P_SLICE].copy(), m[Q_SLICE].copy(), cam.K,
                               cam.R_imu_cam, cam.t_imu_cam)
    return P1, P2


@dataclass
class ResidualInternals:
    point: np.ndarray
    report: TriangulationReport
    parallax: float = np.nan


def _as_point(fp):
    return fp.as_array() if isinstance(fp, FlowPoint) else np.asarray(fp, dtype=float)


def _evaluate(x, fp, cam):
    m = np.ascontiguousarray(x.mean if isinstance(x, StateEstimate) else x, dtype=float)
    a = _as_point(fp)
    status, h, Hx, Hr, pt, par = _flow_point(m, cam.K, cam.R_imu_cam, cam.t_imu_cam,
                                             a[0], a[1], a[2], a[3], 0.0, np.inf, 0.0)
    if status != OK:
        raise DegenerateGeometry(f"flow point rejected: {_GEOMETRY_NAMES[status]}")
    return h, Hx, Hr, pt, par


def flow_residual(x, fp, cam):
    """Predicted-minus-observed flow for one point, plus triangulation internals.

    The report's singular values are those of the world-frame system.
    """
    h, _, _, pt, par = _evaluate(x, fp, cam)
    a = _as_point(fp)
    P1, P2 = camera_matrices(x, cam)
    base = np.linalg.norm(_center(P1) - _center(P2))
    _, _, s, _, _ = _tri_core(P1, P2, a[:2], a[:2] + a[2:4])
    ratio = _sv_ratio(s)
    return h, ResidualInternals(pt, TriangulationReport(s[2], s[3], ratio, base), par)


def _center(P):
    return -np.linalg.solve(P[:, :3], P[:, 3])


def flow_jacobians(x, fp, cam):
    """``(h, H_x, H_r)``: residual, 2x26 state Jacobian, 2x2 flow-noise Jacobian."""
    h, Hx, Hr, _, _ = _evaluate(x, fp, cam)
    return h, Hx, Hr


@dataclass
class UpdateReport:
    accepted: bool
    status: str
    innovation: np.ndarray = None
    S: np.ndarray = None
    nis: float = np.nan
    parallax: float = np.nan


def ekf_update_flow_point(x, fp, cam, gate=GatingConfig()):
    """Gated EKF update with a single flow point (Joseph covariance form)."""
    a = _as_point(fp)
    m = np.ascontiguousarray(x.mean)
    lo = gate.min_parallax_sigmas * np.sqrt(max(a[4], a[5]))
    g, h, Hx, Hr, pt, par = _flow_point(m, cam.K, cam.R_imu_cam, cam.t_imu_cam,
                                        a[0], a[1], a[2], a[3], gate.min_depth,
                                        gate.max_depth, lo)
    if g != OK:
        return x, UpdateReport(False, "degenerate:" + _GEOMETRY_NAMES[g], parallax=par)
    st, nis, mn, Pn, S = _kalman_flow(m, np.ascontiguousarray(x.cov), h, Hx, Hr, a[4], a[5],
                                      gate.threshold, gate.measurement == "projected")
    if st == SINGULAR:
        raise SingularInnovation("flow innovation covariance is not invertible")
    report = UpdateReport(st == ACCEPTED, "accepted" if st == ACCEPTED else "gated",
                          -h, S, float(nis), float(par))
    if st != ACCEPTED:
        return x, report
    return StateEstimate(mn, Pn), report


def select_points(field, gate):
    """Indices of the points used for an update: stride, then an even cap.

    Row-major order (by v1, then u1) and fully deterministic.
    """
    n = len(field)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if field.dense:
        u = field.points[:, 0].astype(np.int64)
        v = field.points[:, 1].astype(np.int64)
        s = gate.subsample_stride
        idx = np.flatnonzero((u % s == 0) & (v % s == 0))
    else:
        order = np.lexsort((field.points[:, 0], field.points[:, 1]))
        idx = order[::gate.subsample_stride]
    cap = gate.max_points_per_update
    if len(idx) > cap:
        idx = idx[np.linspace(0, len(idx) - 1, cap).round().astype(np.int64)]
    return idx


@dataclass
class FieldReport:
    n_points: int = 0
    n_used: int = 0
    accepted: int = 0
    gated: int = 0
    degenerate: int = 0
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    status: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    nis: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def rejected(self):
        return self.gated + self.degenerate


def process_flow_field(x, field, cam, gate=GatingConfig()):
    """Sequential per-point updates over the selected subset of a field.

    The linearization point moves after every accepted point.
    """
    idx = select_points(field, gate)
    report = FieldReport(n_points=len(field), n_used=len(idx), indices=idx)
    if len(idx) == 0:
        return x, report
    pts = np.ascontiguousarray(field.points[idx])
    m, P, status, geo, nis = _process_points(
        np.ascontiguousarray(x.mean), np.ascontiguousarray(x.cov), pts, cam.K,
        cam.R_imu_cam, cam.t_imu_cam, gate.threshold, gate.measurement == "projected",
        gate.min_depth, gate.max_depth, gate.min_parallax_sigmas)
    if len(status) and status[-1] == SINGULAR:
        raise SingularInnovation("flow innovation covariance is not invertible")
    report.status = status
    report.nis = nis
    report.accepted = int(np.sum(status == ACCEPTED))
    report.gated = int(np.sum(status == GATED))
    report.degenerate = int(np.sum(status == DEGENERATE))
    if report.accepted == 0:
        return x, report
    return StateEstimate(m, P), report


def forget_pose(x, sigma_p0=SIGMA_P0, sigma_q0=SIGMA_Q0):
    """Linear prediction with A = blkdiag(I_19, 0_7) and an uninformative Q."""
    m = x.mean.copy()
    P = x.cov.copy()
    m[CORE_DIM:] = 0.0
    P[CORE_DIM:, :] = 0.0
    P[:, CORE_DIM:] = 0.0
    P[PM_SLICE, PM_SLICE] = sigma_p0 ** 2 * np.eye(3)
    P[QM_SLICE, QM_SLICE] = sigma_q0 ** 2 * np.eye(4)
    return StateEstimate(m, P)


def _pose_equality_matrix():
    H = np.zeros((7, STATE_DIM))
    H[0:3, P_SLICE] = np.eye(3)
    H[0:3, PM_SLICE] = -np.eye(3)
    H[3:7, Q_SLICE] = np.eye(4)
    H[3:7, QM_SLICE] = -np.eye(4)
    return H


POSE_EQUALITY = _pose_equality_matrix()


def augment_pose(x, nugget=NUGGET):
    """Linear update with the pseudo-measurement ``p - p_minus = 0``, ``q - q_minus = 0``."""
    m = x.mean.copy()
    P = x.cov.copy()
    if m[QM_SLICE] @ m[Q_SLICE] < 0:
        # double cover: flip the stored past attitude onto the current hemisphere
        m[QM_SLICE] *= -1
        P[QM_SLICE, :] *= -1
        P[:, QM_SLICE] *= -1
    H = POSE_EQUALITY
    S = H @ P @ H.T + nugget * np.eye(7)
    try:
        L = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("pose augmentation innovation is singular") from exc
    HP = H @ P
    K = np.linalg.solve(L.T, np.linalg.solve(L, HP)).T
    m = m + K @ (-(H @ m))
    D = np.eye(STATE_DIM) - K @ H
    P = D @ P @ D.T + nugget * (K @ K.T)
    m = np.ascontiguousarray(m)
    _normalize_quats(m)
    return StateEstimate(m, 0.5 * (P + P.T))


def frame_pair_cycle(x, field, cam, gate=GatingConfig(), sigma_p0=SIGMA_P0,
                     sigma_q0=SIGMA_Q0, nugget=NUGGET):
    """Flow updates, then forget the past pose, then augment the current one."""
    x, report = process_flow_field(x, field, cam, gate)
    x = augment_pose(forget_pose(x, sigma_p0, sigma_q0), nugget)
    return x, report
