"""Strapdown mechanization, the 26-dimensional filter state and EKF prediction."""

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .exceptions import CovarianceNotPSD, NonpositiveDt, NotStationary
from .geometry import _lmat, _qexp, _qexp_jac, _qmul, _rmat, _rot_apply_jac, _rotmat

STATE_DIM = 26
CORE_DIM = 19
AUG_DIM = 7

P_SLICE = slice(0, 3)
V_SLICE = slice(3, 6)
Q_SLICE = slice(6, 10)
BA_SLICE = slice(10, 13)
BW_SLICE = slice(13, 16)
TA_SLICE = slice(16, 19)
PM_SLICE = slice(19, 22)
QM_SLICE = slice(22, 26)

SCALE_INVERSE = 0   # a = (a_meas - b_a) / T_a
SCALE_MULTIPLY = 1  # a = T_a * a_meas - b_a
_SCALE_MODELS = {"inverse": SCALE_INVERSE, "multiply": SCALE_MULTIPLY}


@dataclass
class StateEstimate:
    """Gaussian filter state: ``mean`` (26,) and ``cov`` (26, 26).

    Layout: p, v, q, b_a, b_w, T_a, p_minus, q_minus.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=float).reshape(STATE_DIM)
        self.cov = np.array(self.cov, dtype=float).reshape(STATE_DIM, STATE_DIM)

    @classmethod
    def from_components(cls, p=(0, 0, 0), v=(0, 0, 0), q=(1, 0, 0, 0), b_a=(0, 0, 0),
                        b_w=(0, 0, 0), T_a=(1, 1, 1), p_minus=None, q_minus=None, cov=None):
        m = np.concatenate([p, v, q, b_a, b_w, T_a,
                            p if p_minus is None else p_minus,
                            q if q_minus is None else q_minus]).astype(float)
        return cls(m, np.eye(STATE_DIM) if cov is None else cov)

    def copy(self):
        return StateEstimate(self.mean.copy(), self.cov.copy())

    p = property(lambda self: self.mean[P_SLICE])
    v = property(lambda self: self.mean[V_SLICE])
    q = property(lambda self: self.mean[Q_SLICE])
    b_a = property(lambda self: self.mean[BA_SLICE])
    b_w = property(lambda self: self.mean[BW_SLICE])
    T_a = property(lambda self: self.mean[TA_SLICE])
    p_minus = property(lambda self: self.mean[PM_SLICE])
    q_minus = property(lambda self: self.mean[QM_SLICE])

    def check(self, quaternions=True):
        """Raise CovarianceNotPSD / ValueError if the invariants do not hold."""
        check_covariance(self.cov)
        if quaternions:
            for name, sl in (("q", Q_SLICE), ("q_minus", QM_SLICE)):
                n = np.linalg.norm(self.mean[sl])
                if abs(n - 1.0) > 1e-9:
                    raise ValueError(f"{name} is not unit norm (|{name}| = {n!r})")
        return self


def check_covariance(P, rtol=1e-10):
    """Symmetric within ``rtol * |P|`` and no eigenvalue below ``-rtol * |P|``."""
    if not np.all(np.isfinite(P)):
        raise CovarianceNotPSD("covariance has non-finite entries")
    scale = np.linalg.norm(P, 2)
    asym = np.abs(P - P.T).max()
    if asym > rtol * scale:
        raise CovarianceNotPSD(f"covariance asymmetry {asym:.3g} exceeds {rtol} * |P|")
    lo = np.linalg.eigvalsh(0.5 * (P + P.T)).min()
    if lo < -rtol * scale:
        raise CovarianceNotPSD(f"covariance eigenvalue {lo:.3g} below -{rtol} * |P|")


@dataclass
class ImuSample:
    t: float
    a_tilde: np.ndarray
    w_tilde: np.ndarray

    def __post_init__(self):
        self.a_tilde = np.asarray(self.a_tilde, dtype=float).reshape(3)
        self.w_tilde = np.asarray(self.w_tilde, dtype=float).reshape(3)


@dataclass
class ProcessNoiseConfig:
    """Continuous-time noise densities and gravity.

    The discrete noise added to one IMU sample has variance ``Sigma * dt``,
    so a white sequence of per-sample standard deviation ``s`` at rate ``f``
    corresponds to ``Sigma = s**2 * f``.  The defaults match 0.02 m/s^2 and
    1e-3 rad/s at 100 Hz.

    ``g`` is the gravity reaction vector (points up in ENU): the
    mechanization subtracts it, so a stationary accelerometer reads
    ``R(q)^T g``.
    """

    Sigma_a: np.ndarray = field(default_factory=lambda: np.full(3, 4e-2))
    Sigma_w: np.ndarray = field(default_factory=lambda: np.full(3, 1e-4))
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))
    scale_model: str = "inverse"
    check_gravity: bool = True

    def __post_init__(self):
        self.Sigma_a = _diag3(self.Sigma_a)
        self.Sigma_w = _diag3(self.Sigma_w)
        self.g = np.asarray(self.g, dtype=float).reshape(3)
        if np.any(self.Sigma_a <= 0) or np.any(self.Sigma_w <= 0):
            raise ValueError("noise densities must be strictly positive")
        if self.check_gravity and not 9.7 <= np.linalg.norm(self.g) <= 9.9:
            raise ValueError("gravity magnitude outside [9.7, 9.9] m/s^2")
        if self.scale_model not in _SCALE_MODELS:
            raise ValueError(f"scale_model must be one of {sorted(_SCALE_MODELS)}")

    @property
    def scale_mode(self):
        return _SCALE_MODELS[self.scale_model]


def _diag3(x):
    x = np.asarray(x, dtype=float)
    if x.shape == (3, 3):
        x = np.diag(x)
    return np.broadcast_to(x, (3,)).astype(float)


@dataclass
class StatePrior:
    """Initial standard deviations (metres, m/s, quaternion units, ...)."""

    sigma_p: float = 1e-6
    sigma_v: float = 1e-3
    sigma_att: float = 1e-2
    yaw_inflation: float = 100.0
    sigma_ba: float = 0.1
    sigma_bw: float = 0.01
    sigma_Ta: float = 0.05
    nugget: float = 1e-12


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _corrected_accel(acc, b_a, T_a, mode):
    if mode == 0:
        return (acc - b_a) / T_a
    return T_a * acc - b_a


@njit(cache=True)
def _mechanize(m, acc, gyr, dt, g, mode):
    out = m.copy()
    q = m[6:10]
    phi = (gyr - m[13:16]) * dt
    qn = _qmul(q, _qexp(phi))
    a_c = _corrected_accel(acc, m[10:13], m[16:19], mode)
    out[0:3] = m[0:3] + m[3:6] * dt
    out[3:6] = m[3:6] + (_rotmat(qn) @ a_c - g) * dt
    out[6:10] = qn
    return out


@njit(cache=True)
def _mechanize_jac(m, acc, gyr, dt, g, mode):
    """Propagated mean plus the non-trivial rows (p, v, q) of F_x and F_eps."""
    q = m[6:10]
    b_a = m[10:13]
    T_a = m[16:19]
    phi = (gyr - m[13:16]) * dt
    dq = _qexp(phi)
    qn = _qmul(q, dq)
    Rn = _rotmat(qn)
    a_c = _corrected_accel(acc, b_a, T_a, mode)

    out = m.copy()
    out[0:3] = m[0:3] + m[3:6] * dt
    out[3:6] = m[3:6] + (Rn @ a_c - g) * dt
    out[6:10] = qn

    dqn_dq = _rmat(dq)
    dqn_dphi = _lmat(q) @ _qexp_jac(phi)
    dRa_dqn = _rot_apply_jac(qn, a_c)

    F = np.zeros((10, 26))
    Fe = np.zeros((10, 6))
    for i in range(3):
        F[i, i] = 1.0
        F[i, 3 + i] = dt
        F[3 + i, 3 + i] = 1.0
    # velocity
    F[3:6, 6:10] = dt * (dRa_dqn @ dqn_dq)
    F[3:6, 13:16] = -dt * dt * (dRa_dqn @ dqn_dphi)
    if mode == 0:
        for j in range(3):
            F[3:6, 10 + j] = -dt * Rn[:, j] / T_a[j]
            F[3:6, 16 + j] = -dt * Rn[:, j] * (acc[j] - b_a[j]) / (T_a[j] * T_a[j])
            Fe[3:6, j] = dt * Rn[:, j] / T_a[j]
    else:
        for j in range(3):
            F[3:6, 10 + j] = -dt * Rn[:, j]
            F[3:6, 16 + j] = dt * Rn[:, j] * acc[j]
            Fe[3:6, j] = dt * Rn[:, j] * T_a[j]
    Fe[3:6, 3:6] = dt * dt * (dRa_dqn @ dqn_dphi)
    # quaternion
    F[6:10, 6:10] = dqn_dq
    F[6:10, 13:16] = -dt * dqn_dphi
    Fe[6:10, 3:6] = dt * dqn_dphi
    return out, F, Fe


@njit(cache=True)
def _predict(m, P, acc, gyr, dt, sa, sw, g, mode):
    """EKF prediction using the block structure of F_x (rows 10.. are identity)."""
    out, F, Fe = _mechanize_jac(m, acc, gyr, dt, g, mode)
    A = P.copy()
    A[0:10, :] = F @ P
    Pn = A.copy()
    Pn[:, 0:10] = A @ F.T
    Q = np.zeros((6, 6))
    for i in range(3):
        Q[i, i] = sa[i] * dt
        Q[3 + i, 3 + i] = sw[i] * dt
    Pn[0:10, 0:10] += Fe @ Q @ Fe.T
    Pn = 0.5 * (Pn + Pn.T)
    qn = out[6:10]
    out[6:10] = qn / np.sqrt(qn @ qn)
    return out, Pn, F


@njit(cache=True)
def _compose_top(F, C):
    """F_full @ C for F_full = [[F], [0, I]] (F is the top 10 rows)."""
    out = C.copy()
    out[0:10, :] = F @ C
    return out


# --------------------------------------------------------------------------
# public API


def _mean_of(x):
    return x.mean if isinstance(x, StateEstimate) else np.asarray(x, dtype=float)


def _check_dt(dt):
    if not dt > 0:
        raise NonpositiveDt(f"dt must be positive, got {dt!r}")


def mechanize(x, imu, dt, cfg):
    """Propagate a state mean through one IMU interval of length ``dt``.

    Position uses the previous velocity; velocity uses the attitude at the
    end of the interval.  Bias, scale and the augmented pose are constant.
    """
    _check_dt(dt)
    m = np.ascontiguousarray(_mean_of(x), dtype=float)
    return _mechanize(m, imu.a_tilde, imu.w_tilde, float(dt), cfg.g, cfg.scale_mode)


def process_jacobians(x, imu, dt, cfg):
    """Full ``F_x`` (26, 26) and ``F_eps`` (26, 6) of :func:`mechanize`.

    Noise ordering is (accelerometer, gyroscope).
    """
    _check_dt(dt)
    m = np.ascontiguousarray(_mean_of(x), dtype=float)
    _, F, Fe = _mechanize_jac(m, imu.a_tilde, imu.w_tilde, float(dt), cfg.g, cfg.scale_mode)
    Fx = np.eye(STATE_DIM)
    Fx[:10] = F
    Feps = np.zeros((STATE_DIM, 6))
    Feps[:10] = Fe
    return Fx, Feps


def ekf_predict(x, imu, dt, cfg, validate=True):
    """EKF prediction step for one IMU sample."""
    _check_dt(dt)
    if validate:
        check_covariance(x.cov)
    m, P, _ = _predict(np.ascontiguousarray(x.mean), np.ascontiguousarray(x.cov),
                       imu.a_tilde, imu.w_tilde, float(dt), cfg.Sigma_a, cfg.Sigma_w,
                       cfg.g, cfg.scale_mode)
    return StateEstimate(m, P)


def augmented_copy(mean19, cov19, nugget=1e-12):
    """Full state whose past pose is an exact copy of the current pose."""
    J = np.zeros((STATE_DIM, CORE_DIM))
    J[:CORE_DIM] = np.eye(CORE_DIM)
    J[PM_SLICE, P_SLICE] = np.eye(3)
    J[QM_SLICE, Q_SLICE] = np.eye(4)
    P = J @ cov19 @ J.T
    P[CORE_DIM:, CORE_DIM:] += nugget * np.eye(AUG_DIM)
    return StateEstimate(J @ mean19, 0.5 * (P + P.T))


def prior_covariance(q, prior=StatePrior()):
    """19x19 covariance from a StatePrior; yaw inflated about world up."""
    d = np.concatenate([np.full(3, prior.sigma_p), np.full(3, prior.sigma_v),
                        np.full(4, prior.sigma_att), np.full(3, prior.sigma_ba),
                        np.full(3, prior.sigma_bw), np.full(3, prior.sigma_Ta)])
    P = np.diag(d ** 2)
    if prior.yaw_inflation != 1.0:
        # tangent of a world-frame yaw rotation: d/dpsi (qexp(psi z) * q) = 0.5 (0,0,0,1) * q
        t = 0.5 * _qmul(np.array([0.0, 0.0, 0.0, 1.0]), np.asarray(q, float))
        sig = prior.sigma_att * prior.yaw_inflation
        P[Q_SLICE, Q_SLICE] += (sig ** 2 - prior.sigma_att ** 2) * np.outer(t, t) / (t @ t)
    return P


def initial_state(p, v, q, prior=StatePrior(), b_a=(0, 0, 0), b_w=(0, 0, 0),
                  T_a=(1, 1, 1), inflate_yaw=False):
    """State at a known pose with zero-mean bias priors and copied past pose."""
    m19 = np.concatenate([p, v, q, b_a, b_w, T_a]).astype(float)
    if not inflate_yaw:
        prior = StatePrior(**{**prior.__dict__, "yaw_inflation": 1.0})
    return augmented_copy(m19, prior_covariance(q, prior), prior.nugget)


def initialize_stationary(samples, cfg, prior=StatePrior(), min_standstill=2.0,
                          acc_var_threshold=0.01, gyro_var_threshold=1e-4):
    """Initial state from an IMU window recorded at standstill.

    Gyro bias is the mean rate; roll and pitch align the mean specific force
    with gravity (yaw is set to zero and its uncertainty inflated); only
    the component of accelerometer bias along the measured gravity
    direction is assigned.
    """
    t = np.array([s.t for s in samples], dtype=float)
    acc = np.array([s.a_tilde for s in samples], dtype=float)
    gyr = np.array([s.w_tilde for s in samples], dtype=float)
    if len(samples) < 2 or t[-1] - t[0] < min_standstill:
        raise NotStationary(f"standstill window shorter than {min_standstill} s")
    va = acc.var(axis=0, ddof=1).max()
    vw = gyr.var(axis=0, ddof=1).max()
    if va > acc_var_threshold or vw > gyro_var_threshold:
        raise NotStationary(f"IMU variance too high for standstill (acc {va:.3g}, gyro {vw:.3g})")

    b_w = gyr.mean(axis=0)
    f = acc.mean(axis=0)
    fn = np.linalg.norm(f)
    u = f / fn
    roll = np.arctan2(u[1], u[2])
    pitch = np.arctan2(-u[0], np.hypot(u[1], u[2]))
    q_pitch = np.array([np.cos(pitch / 2), 0.0, np.sin(pitch / 2), 0.0])
    q_roll = np.array([np.cos(roll / 2), np.sin(roll / 2), 0.0, 0.0])
    q = _qmul(q_pitch, q_roll)
    # T_a = 1 at init, so both scale models give the same bias
    b_a = (fn - np.linalg.norm(cfg.g)) * u
    m19 = np.concatenate([np.zeros(3), np.zeros(3), q, b_a, b_w, np.ones(3)])
    return augmented_copy(m19, prior_covariance(q, prior), prior.nugget)
