"""Quaternions, pinhole projection and two-view triangulation.

Quaternions are ``[w, x, y, z]`` arrays using the Hamilton product; a state
quaternion maps body-frame vectors into the world frame.  The public helpers
return canonical (``w >= 0``) unit quaternions.  The underscore kernels are
compiled with numba and used directly by the filter, which keeps its
quaternion sign continuous instead of canonical.
"""

from dataclasses import dataclass, field
from math import cos, sin, sqrt

import numpy as np
from numba import njit

from .exceptions import DegenerateGeometry, ProjectionError

DEPTH_EPS = 1e-6
BASELINE_EPS = 1e-4
DEGENERACY_RATIO = 10.0

DEFAULT_WIDTH = 512
DEFAULT_HEIGHT = 683

# status codes shared with flow_fusion
OK = 0
BAD_BASELINE = 1
BAD_CONDITIONING = 2
BAD_DEPTH = 3


# --------------------------------------------------------------------------
# quaternion kernels


@njit(cache=True)
def _qmul(a, b):
    out = np.empty(4)
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]
    return out


@njit(cache=True)
def _lmat(q):
    """Matrix L with q * p == L @ p."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    return np.array([[w, -x, -y, -z],
                     [x, w, -z, y],
                     [y, z, w, -x],
                     [z, -y, x, w]])


@njit(cache=True)
def _rmat(p):
    """Matrix R with q * p == R @ q."""
    w, x, y, z = p[0], p[1], p[2], p[3]
    return np.array([[w, -x, -y, -z],
                     [x, w, z, -y],
                     [y, -z, w, x],
                     [z, y, -x, w]])


@njit(cache=True)
def _qexp(phi):
    theta = sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    out = np.empty(4)
    if theta < 1e-8:
        out[0] = 1.0 - theta * theta / 8.0
        k = 0.5 - theta * theta / 48.0
    else:
        out[0] = cos(0.5 * theta)
        k = sin(0.5 * theta) / theta
    out[1] = k * phi[0]
    out[2] = k * phi[1]
    out[3] = k * phi[2]
    return out


@njit(cache=True)
def _qexp_jac(phi):
    """d qexp(phi) / d phi, shape (4, 3)."""
    theta = sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    t2 = theta * theta
    if theta < 1e-3:
        s = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0
        c = -1.0 / 24.0 + t2 / 960.0
    else:
        sh = sin(0.5 * theta)
        s = sh / theta
        c = (0.5 * theta * cos(0.5 * theta) - sh) / (t2 * theta)
    J = np.empty((4, 3))
    for j in range(3):
        J[0, j] = -0.5 * s * phi[j]
        for i in range(3):
            J[i + 1, j] = c * phi[i] * phi[j]
        J[j + 1, j] += s
    return J


@njit(cache=True)
def _rotmat(q):
    """Rotation matrix of q / |q|."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    n = w * w + x * x + y * y + z * z
    R = np.empty((3, 3))
    R[0, 0] = w * w + x * x - y * y - z * z
    R[0, 1] = 2.0 * (x * y - w * z)
    R[0, 2] = 2.0 * (x * z + w * y)
    R[1, 0] = 2.0 * (x * y + w * z)
    R[1, 1] = w * w - x * x + y * y - z * z
    R[1, 2] = 2.0 * (y * z - w * x)
    R[2, 0] = 2.0 * (x * z - w * y)
    R[2, 1] = 2.0 * (y * z + w * x)
    R[2, 2] = w * w - x * x - y * y + z * z
    return R / n


@njit(cache=True)
def _rotmat_jac(q):
    """d R(q/|q|) / d q as an array of shape (4, 3, 3)."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    n = w * w + x * x + y * y + z * z
    R = _rotmat(q)
    D = np.empty((4, 3, 3))
    D[0, 0, 0], D[0, 0, 1], D[0, 0, 2] = w, -z, y
    D[0, 1, 0], D[0, 1, 1], D[0, 1, 2] = z, w, -x
    D[0, 2, 0], D[0, 2, 1], D[0, 2, 2] = -y, x, w
    D[1, 0, 0], D[1, 0, 1], D[1, 0, 2] = x, y, z
    D[1, 1, 0], D[1, 1, 1], D[1, 1, 2] = y, -x, -w
    D[1, 2, 0], D[1, 2, 1], D[1, 2, 2] = z, w, -x
    D[2, 0, 0], D[2, 0, 1], D[2, 0, 2] = -y, x, w
    D[2, 1, 0], D[2, 1, 1], D[2, 1, 2] = x, y, z
    D[2, 2, 0], D[2, 2, 1], D[2, 2, 2] = -w, z, -y
    D[3, 0, 0], D[3, 0, 1], D[3, 0, 2] = -z, -w, x
    D[3, 1, 0], D[3, 1, 1], D[3, 1, 2] = w, -z, y
    D[3, 2, 0], D[3, 2, 1], D[3, 2, 2] = x, y, z
    for k in range(4):
        for i in range(3):
            for j in range(3):
                D[k, i, j] = 2.0 * (D[k, i, j] - q[k] * R[i, j]) / n
    return D


@njit(cache=True)
def _rot_apply_jac(q, a):
    """d (R(q) a) / d q, shape (3, 4)."""
    D = _rotmat_jac(q)
    J = np.empty((3, 4))
    for k in range(4):
        J[:, k] = D[k] @ a
    return J


# --------------------------------------------------------------------------
# public quaternion API


def _canonical(q):
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q


def as_quaternion(q):
    q = np.asarray(q, dtype=float)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ValueError("quaternion must be a finite array of shape (4,)")
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-9:
        raise ValueError(f"quaternion is not unit norm (|q| = {n!r})")
    return q


def identity_quaternion():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_multiply(a, b):
    """Hamilton product ``a * b``, renormalized, ``w >= 0``."""
    return _canonical(_qmul(as_quaternion(a), as_quaternion(b)))


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_rate(omega, dt):
    """Unit quaternion for the rotation vector ``omega * dt``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    omega = np.asarray(omega, dtype=float).reshape(3)
    return _canonical(_qexp(omega * float(dt)))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return quat_from_rate(axis / np.linalg.norm(axis) * angle, 1.0)


def rotation_matrix(q):
    return _rotmat(np.asarray(q, dtype=float))


def quat_from_matrix(R):
    """Inverse of :func:`rotation_matrix` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    cand = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(cand))
    if i == 0:
        w = 0.5 * sqrt(1.0 + tr)
        q = [w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w),
             (R[1, 0] - R[0, 1]) / (4 * w)]
    elif i == 1:
        x = 0.5 * sqrt(1.0 + 2 * R[0, 0] - tr)
        q = [(R[2, 1] - R[1, 2]) / (4 * x), x, (R[0, 1] + R[1, 0]) / (4 * x),
             (R[0, 2] + R[2, 0]) / (4 * x)]
    elif i == 2:
        y = 0.5 * sqrt(1.0 + 2 * R[1, 1] - tr)
        q = [(R[0, 2] - R[2, 0]) / (4 * y), (R[0, 1] + R[1, 0]) / (4 * y), y,
             (R[1, 2] + R[2, 1]) / (4 * y)]
    else:
        z = 0.5 * sqrt(1.0 + 2 * R[2, 2] - tr)
        q = [(R[1, 0] - R[0, 1]) / (4 * z), (R[0, 2] + R[2, 0]) / (4 * z),
             (R[1, 2] + R[2, 1]) / (4 * z), z]
    return _canonical(np.array(q))


def rotate_vector(q, v):
    """Rotate ``v`` by ``q`` (``q * v * q^*``)."""
    q = as_quaternion(q)
    v = np.asarray(v, dtype=float).reshape(3)
    qv = np.concatenate(([0.0], v))
    return _qmul(_qmul(q, qv), quat_conjugate(q))[1:]


# --------------------------------------------------------------------------
# camera


@dataclass
class CameraModel:
    """Pinhole intrinsics plus IMU-to-camera extrinsics.

    ``R_imu_cam`` holds the camera axes expressed in the IMU frame
    (``v_imu = R_imu_cam @ v_cam``) and ``t_imu_cam`` is the camera centre in
    the IMU frame, in metres.  The camera looks along its +z axis with +x to
    the right and +y down.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int = DEFAULT_WIDTH
    image_height: int = DEFAULT_HEIGHT
    R_imu_cam: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_imu_cam: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R_imu_cam = np.ascontiguousarray(self.R_imu_cam, dtype=float).reshape(3, 3)
        self.t_imu_cam = np.ascontiguousarray(self.t_imu_cam, dtype=float).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise ValueError("principal point outside the image")
        R = self.R_imu_cam
        if (np.abs(R @ R.T - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(R) - 1.0) > 1e-9):
            raise ValueError("R_imu_cam is not a proper rotation")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def in_bounds(self, u, v):
        return (u >= 0) & (u < self.image_width) & (v >= 0) & (v < self.image_height)


def forward_camera(pitch_deg=10.0, fx=500.0, fy=500.0, width=DEFAULT_WIDTH,
                   height=DEFAULT_HEIGHT, lever_arm=(0.0, 0.0, 0.0)):
    """Camera looking along body +x (body z up), pitched down by ``pitch_deg``."""
    a = np.deg2rad(pitch_deg)
    z_c = np.array([np.cos(a), 0.0, -np.sin(a)])
    x_c = np.array([0.0, -1.0, 0.0])
    y_c = np.cross(z_c, x_c)
    return CameraModel(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                       np.column_stack([x_c, y_c, z_c]), np.asarray(lever_arm, float))


@njit(cache=True)
def _camera_projection(p, q, K, R_ic, t_ic):
    """Projection matrix for IMU pose (p, q) and its derivative.

    Returns ``P`` (3, 4) and ``dP`` (12, 7): derivative of ``P.ravel()`` with
    respect to ``(p, q)``.
    """
    Rq = _rotmat(q)
    dRq = _rotmat_jac(q)
    c = np.empty(3)
    for i in range(3):
        c[i] = p[i] + Rq[i, 0] * t_ic[0] + Rq[i, 1] * t_ic[1] + Rq[i, 2] * t_ic[2]
    # M = K W with W = (Rq R_ic)^T = R_ic^T Rq^T
    W = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            W[i, j] = R_ic[0, i] * Rq[j, 0] + R_ic[1, i] * Rq[j, 1] + R_ic[2, i] * Rq[j, 2]
    M = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            M[i, j] = K[i, 0] * W[0, j] + K[i, 1] * W[1, j] + K[i, 2] * W[2, j]
    P = np.empty((3, 4))
    dP = np.zeros((12, 7))
    for r in range(3):
        for j in range(3):
            P[r, j] = M[r, j]
            dP[4 * r + 3, j] = -M[r, j]
        P[r, 3] = -(M[r, 0] * c[0] + M[r, 1] * c[1] + M[r, 2] * c[2])
    dW = np.empty((3, 3))
    dM = np.empty((3, 3))
    dc = np.empty(3)
    for k in range(4):
        for i in range(3):
            dc[i] = dRq[k, i, 0] * t_ic[0] + dRq[k, i, 1] * t_ic[1] + dRq[k, i, 2] * t_ic[2]
            for j in range(3):
                dW[i, j] = (R_ic[0, i] * dRq[k, j, 0] + R_ic[1, i] * dRq[k, j, 1]
                            + R_ic[2, i] * dRq[k, j, 2])
        for i in range(3):
            for j in range(3):
                dM[i, j] = K[i, 0] * dW[0, j] + K[i, 1] * dW[1, j] + K[i, 2] * dW[2, j]
        for r in range(3):
            acc = 0.0
            for j in range(3):
                dP[4 * r + j, 3 + k] = dM[r, j]
                acc += dM[r, j] * c[j] + M[r, j] * dc[j]
            dP[4 * r + 3, 3 + k] = -acc
    return P, dP


def projection_matrix(p, q, cam):
    """``K [R^T | -R^T c]`` for an IMU pose, composed with the extrinsics."""
    P, _ = _camera_projection(np.asarray(p, float), np.asarray(q, float), cam.K,
                              cam.R_imu_cam, cam.t_imu_cam)
    return P


def camera_center(P):
    P = np.asarray(P, dtype=float)
    return -np.linalg.solve(P[:, :3], P[:, 3])


def project(P, point, depth_epsilon=DEPTH_EPS):
    """Pixel coordinates of a world point (3-vector or homogeneous 4-vector)."""
    X = np.asarray(point, dtype=float)
    if X.shape == (3,):
        X = np.append(X, 1.0)
    if X[3] == 0:
        raise ProjectionError("point at infinity")
    y = np.asarray(P, dtype=float) @ (X / X[3])
    if y[2] <= depth_epsilon:
        raise ProjectionError(f"homogeneous depth {y[2]:.3g} is not in front of the camera")
    return y[:2] / y[2]


# --------------------------------------------------------------------------
# triangulation


@njit(cache=True)
def _svd4(B):
    """One-sided Jacobi SVD of a 4x4 matrix.

    Returns singular values (descending) and right singular vectors as
    columns.  Deterministic: fixed cyclic pair order.
    """
    W = B.copy()
    V = np.eye(4)
    for _sweep in range(60):
        rotated = False
        for i in range(3):
            for j in range(i + 1, 4):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(4):
                    alpha += W[k, i] * W[k, i]
                    beta += W[k, j] * W[k, j]
                    gamma += W[k, i] * W[k, j]
                if gamma == 0.0 or abs(gamma) <= 1e-15 * sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0 else -1.0
                t = sgn / (abs(zeta) + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(4):
                    wi = W[k, i]
                    wj = W[k, j]
                    W[k, i] = c * wi - s * wj
                    W[k, j] = s * wi + c * wj
                    vi = V[k, i]
                    vj = V[k, j]
                    V[k, i] = c * vi - s * vj
                    V[k, j] = s * vi + c * vj
        if not rotated:
            break
    sv = np.empty(4)
    for j in range(4):
        acc = 0.0
        for k in range(4):
            acc += W[k, j] * W[k, j]
        sv[j] = sqrt(acc)
    order = np.argsort(-sv)
    return sv[order], V[:, order]


@njit(cache=True)
def _tri_core(P1, P2, x1, x2):
    A = np.empty((4, 4))
    A[0] = x1[0] * P1[2] - P1[0]
    A[1] = x1[1] * P1[2] - P1[1]
    A[2] = x2[0] * P2[2] - P2[0]
    A[3] = x2[1] * P2[2] - P2[1]
    nrm = np.empty(4)
    B = np.empty((4, 4))
    for i in range(4):
        nrm[i] = sqrt(A[i, 0] ** 2 + A[i, 1] ** 2 + A[i, 2] ** 2 + A[i, 3] ** 2)
        B[i] = A[i] / nrm[i]
    s, V = _svd4(B)
    X = V[:, 3].copy()
    if X[3] < 0 or (X[3] == 0 and X[np.argmax(np.abs(X))] < 0):
        X = -X
        V[:, 3] = X
    return B, nrm, s, V, X


@njit(cache=True)
def _tri_jac(P1, P2, x1, x2, B, nrm, s, V, X):
    """Jacobian of the dehomogenized point w.r.t. (P1, P2, u1, v1, u2, v2).

    Implicit-function derivative of the smallest right singular vector of
    the row-normalized system.  Every input perturbs one or two rows of
    the system, so the map from a row perturbation to the point is built
    once per row.  Shape (3, 28).
    """
    pt = X[:3] / X[3]
    # G = d pt / d X restricted to the singular subspace, divided by the gaps
    G = np.zeros((3, 4))
    for j in range(3):
        gap = s[3] * s[3] - s[j] * s[j]
        a = np.empty(3)
        for r in range(3):
            a[r] = (V[r, j] - pt[r] * V[3, j]) / X[3] / gap
        for r in range(3):
            for c in range(4):
                G[r, c] += a[r] * V[c, j]
    T = np.empty((4, 3, 4))
    L = np.empty((4, 4))
    for i in range(4):
        beta = B[i, 0] * X[0] + B[i, 1] * X[1] + B[i, 2] * X[2] + B[i, 3] * X[3]
        # L = (beta I + b X^T) (I - b b^T) / n
        for r in range(4):
            for c in range(4):
                L[r, c] = B[i, r] * X[c]
            L[r, r] += beta
        bL = np.zeros(4)
        for r in range(4):
            acc = 0.0
            for c in range(4):
                acc += L[r, c] * B[i, c]
            bL[r] = acc
        for r in range(4):
            for c in range(4):
                L[r, c] = (L[r, c] - bL[r] * B[i, c]) / nrm[i]
        for r in range(3):
            for c in range(4):
                T[i, r, c] = (G[r, 0] * L[0, c] + G[r, 1] * L[1, c]
                              + G[r, 2] * L[2, c] + G[r, 3] * L[3, c])
    J = np.empty((3, 28))
    for c in range(4):
        for r in range(3):
            J[r, c] = -T[0, r, c]
            J[r, 4 + c] = -T[1, r, c]
            J[r, 8 + c] = x1[0] * T[0, r, c] + x1[1] * T[1, r, c]
            J[r, 12 + c] = -T[2, r, c]
            J[r, 16 + c] = -T[3, r, c]
            J[r, 20 + c] = x2[0] * T[2, r, c] + x2[1] * T[3, r, c]
    for r in range(3):
        J[r, 24] = T[0, r, 0] * P1[2, 0] + T[0, r, 1] * P1[2, 1] + T[0, r, 2] * P1[2, 2] + T[0, r, 3] * P1[2, 3]
        J[r, 25] = T[1, r, 0] * P1[2, 0] + T[1, r, 1] * P1[2, 1] + T[1, r, 2] * P1[2, 2] + T[1, r, 3] * P1[2, 3]
        J[r, 26] = T[2, r, 0] * P2[2, 0] + T[2, r, 1] * P2[2, 1] + T[2, r, 2] * P2[2, 2] + T[2, r, 3] * P2[2, 3]
        J[r, 27] = T[3, r, 0] * P2[2, 0] + T[3, r, 1] * P2[2, 1] + T[3, r, 2] * P2[2, 2] + T[3, r, 3] * P2[2, 3]
    return pt, J


@dataclass(frozen=True)
class TriangulationReport:
    sigma3: float
    sigma4: float
    ratio: float
    baseline: float


@njit(cache=True)
def _sv_ratio(s):
    """``sigma3 / sigma4``; zero when the null space is two-dimensional."""
    if s[2] <= 1e-12 * s[0]:
        return 0.0
    if s[3] <= 0.0:
        return np.inf
    return s[2] / s[3]



def _check_inputs(P1, P2, x1, x2):
    P1 = np.ascontiguousarray(P1, dtype=float).reshape(3, 4)
    P2 = np.ascontiguousarray(P2, dtype=float).reshape(3, 4)
    x1 = np.ascontiguousarray(x1, dtype=float).reshape(2)
    x2 = np.ascontiguousarray(x2, dtype=float).reshape(2)
    return P1, P2, x1, x2


def _triangulate(P1, P2, x1, x2, ratio_threshold, baseline_epsilon):
    baseline = float(np.linalg.norm(camera_center(P1) - camera_center(P2)))
    B, nrm, s, V, X = _tri_core(P1, P2, x1, x2)
    report = TriangulationReport(float(s[2]), float(s[3]), float(_sv_ratio(s)), baseline)
    if baseline < baseline_epsilon:
        raise DegenerateGeometry(f"baseline {baseline:.3g} m below {baseline_epsilon}", report)
    if report.ratio < ratio_threshold:
        raise DegenerateGeometry(
            f"ambiguous depth: sigma3/sigma4 = {report.ratio:.3g} < {ratio_threshold}", report)
    if abs(X[3]) < 1e-12 * np.abs(X).max():
        raise DegenerateGeometry("triangulated point at infinity", report)
    return (B, nrm, s, V, X), report


def triangulate(P1, P2, x1, x2, ratio_threshold=DEGENERACY_RATIO,
                baseline_epsilon=BASELINE_EPS):
    """Linear two-view triangulation.

    Solves the stacked 4x4 homogeneous system built from the pixel
    coordinates ``x1`` in view 1 and ``x2`` in view 2.  Rows are
    normalized before the SVD.  Returns the world point and a
    :class:`TriangulationReport` with the two smallest singular values.

    Raises DegenerateGeometry for short baselines or when
    ``sigma3 / sigma4 < ratio_threshold``.
    """
    P1, P2, x1, x2 = _check_inputs(P1, P2, x1, x2)
    core, report = _triangulate(P1, P2, x1, x2, ratio_threshold, baseline_epsilon)
    X = core[-1]
    return X[:3] / X[3], report


def triangulate_jacobian(P1, P2, x1, x2, ratio_threshold=DEGENERACY_RATIO,
                         baseline_epsilon=BASELINE_EPS):
    """Derivative of :func:`triangulate` with respect to all its inputs.

    Columns are ordered ``P1.ravel()`` (12), ``P2.ravel()`` (12), ``u1, v1,
    u2, v2``.  Returns ``(point, J)`` with ``J`` of shape (3, 28).
    """
    P1, P2, x1, x2 = _check_inputs(P1, P2, x1, x2)
    core, _ = _triangulate(P1, P2, x1, x2, ratio_threshold, baseline_epsilon)
    return _tri_jac(P1, P2, x1, x2, *core)
