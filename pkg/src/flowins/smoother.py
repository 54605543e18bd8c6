"""Filter history recording and extended RTS smoothing."""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import SingularPrediction
from .ins import P_SLICE, Q_SLICE, QM_SLICE, V_SLICE, STATE_DIM
from .trajectory import TrajectoryEstimate

TAGS = ("init", "imu", "flow", "gnss", "forget", "augment")
JITTER = 1e-12


@dataclass
class FilterHistory:
    """Checkpoints of a filtering pass.

    Record ``k`` holds the transition ``F[k]`` from the filtered estimate of
    record ``k - 1`` to the prediction of record ``k``, the predicted
    moments, and the filtered moments after all updates attached to that
    record.  Consecutive IMU steps may be folded into one record by
    composing their Jacobians.
    """

    times: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    F: list = field(default_factory=list)
    m_pred: list = field(default_factory=list)
    P_pred: list = field(default_factory=list)
    m_filt: list = field(default_factory=list)
    P_filt: list = field(default_factory=list)

    def __len__(self):
        return len(self.times)

    def append(self, t, tag, F, m_pred, P_pred, m_filt, P_filt):
        if tag not in TAGS:
            raise ValueError(f"unknown history tag {tag!r}")
        if self.times and t < self.times[-1]:
            raise ValueError("history records must be chronological")
        self.times.append(float(t))
        self.tags.append(tag)
        self.F.append(None if F is None else np.array(F, dtype=float))
        self.m_pred.append(np.array(m_pred, dtype=float))
        self.P_pred.append(np.array(P_pred, dtype=float))
        self.m_filt.append(np.array(m_filt, dtype=float))
        self.P_filt.append(np.array(P_filt, dtype=float))

    def set_filtered(self, m, P, tag=None):
        """Overwrite the filtered moments of the last record (more updates arrived)."""
        self.m_filt[-1] = np.array(m, dtype=float)
        self.P_filt[-1] = np.array(P, dtype=float)
        if tag is not None:
            self.tags[-1] = tag

    def trajectory(self, smoothed=None):
        """Track from filtered (or given smoothed) moments, one sample per timestamp."""
        means = self.m_filt if smoothed is None else smoothed.means
        covs = self.P_filt if smoothed is None else smoothed.covs
        return _track(np.asarray(self.times), np.asarray(means), covs)


@dataclass
class SmoothedHistory:
    times: np.ndarray
    means: np.ndarray
    covs: list
    jittered: int = 0

    def trajectory(self):
        return _track(self.times, self.means, self.covs)


def _track(times, means, covs):
    # last record wins at repeated timestamps
    last = np.r_[times[1:] != times[:-1], True]
    idx = np.flatnonzero(last)
    return TrajectoryEstimate(times[idx], means[idx][:, P_SLICE], means[idx][:, Q_SLICE],
                              means[idx][:, V_SLICE],
                              np.array([covs[i][P_SLICE, P_SLICE] for i in idx]))


def _scaled_cholesky(P):
    """Cholesky of the unit-diagonal rescaling of ``P``.  Returns (factor, d, jittered)."""
    d = np.sqrt(np.clip(np.diag(P), 1e-300, None))
    C = P / np.outer(d, d)
    C = 0.5 * (C + C.T)
    try:
        return cho_factor(C, lower=True), d, False
    except np.linalg.LinAlgError:
        C = C + JITTER * np.eye(len(C))
        return cho_factor(C, lower=True), d, True


def _normalize_aligned(m, ref):
    for sl in (Q_SLICE, QM_SLICE):
        q = m[sl]
        n = np.linalg.norm(q)
        if n > 0:
            q = q / n
        if q @ ref[sl] < 0:
            q = -q
        m[sl] = q
    return m


def rts_smooth_states(hist):
    """Backward RTS pass with the stored linearizations.

    Records whose transition is ``None`` carry only measurement effects,
    which are already in the filtered moments.  Works for any state size;
    quaternion blocks are renormalized only for the navigation state.
    """
    n = len(hist)
    if n == 0:
        raise ValueError("empty filter history")
    dim = len(hist.m_filt[0])
    ms = np.empty((n, dim))
    Ps = [None] * n
    ms[-1] = hist.m_filt[-1]
    Ps[-1] = hist.P_filt[-1].copy()
    jittered = 0
    for k in range(n - 2, -1, -1):
        F = hist.F[k + 1]
        Pf = hist.P_filt[k]
        Pp = hist.P_pred[k + 1]
        if F is None:
            F = np.eye(dim)
        factor, d, jit = _scaled_cholesky(Pp)
        if jit:
            jittered += 1
            warnings.warn(f"predicted covariance at t={hist.times[k + 1]:.3f} needed jitter",
                          SingularPrediction, stacklevel=2)
        # G = Pf F^T Pp^{-1}, solved as Pp^{-1} F Pf through the scaled factor
        FPf = F @ Pf
        Gt = cho_solve(factor, FPf / d[:, None]) / d[:, None]
        G = Gt.T
        ms[k] = hist.m_filt[k] + G @ (ms[k + 1] - hist.m_pred[k + 1])
        Pk = Pf + G @ (Ps[k + 1] - Pp) @ G.T
        Ps[k] = 0.5 * (Pk + Pk.T)
    if dim == STATE_DIM:
        for k in range(n):
            _normalize_aligned(ms[k], hist.m_filt[k])
    return SmoothedHistory(np.asarray(hist.times), ms, Ps, jittered)


def rts_smooth(hist):
    """Smoothed track, one sample per record timestamp."""
    return rts_smooth_states(hist).trajectory()
