"""GNSS fixes: WGS to local ENU conversion and position updates."""

from dataclasses import dataclass

import numpy as np

from .exceptions import SingularInnovation
from .ins import P_SLICE, STATE_DIM, StateEstimate

EARTH_RADIUS = 6371000.0
CHI2_3DOF_95 = 7.815
CHI2_2DOF_95 = 5.991


@dataclass
class GnssFix:
    t: float
    lat: float
    lon: float
    alt: float
    accuracy: float

    def __post_init__(self):
        if not abs(self.lat) <= 90 or not abs(self.lon) <= 180:
            raise ValueError(f"invalid coordinates ({self.lat}, {self.lon})")
        if not self.accuracy > 0:
            raise ValueError("accuracy radius must be positive")


@dataclass(frozen=True)
class EnuOrigin:
    lat0: float
    lon0: float
    alt0: float = 0.0

    def __post_init__(self):
        if not abs(self.lat0) <= 90 or not abs(self.lon0) <= 180:
            raise ValueError(f"invalid origin ({self.lat0}, {self.lon0})")

    @classmethod
    def from_fix(cls, fix):
        return cls(fix.lat, fix.lon, fix.alt)


def wgs_to_enu(lat, lon, alt, origin):
    """Spherical-Earth tangent-plane coordinates.  Accepts scalars or arrays."""
    lat, lon, alt = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (lat, lon, alt)))
    dlon = (lon - origin.lon0 + 180.0) % 360.0 - 180.0
    e = EARTH_RADIUS * np.cos(np.radians(origin.lat0)) * np.radians(dlon)
    n = EARTH_RADIUS * np.radians(lat - origin.lat0)
    return np.stack([e, n, alt - origin.alt0], axis=-1)


def fix_to_enu(fix, origin):
    return wgs_to_enu(fix.lat, fix.lon, fix.alt, origin)


def enu_to_wgs(enu, origin):
    """Inverse of :func:`wgs_to_enu`; returns ``(lat, lon, alt)``."""
    enu = np.asarray(enu, dtype=float)
    lat = origin.lat0 + np.degrees(enu[..., 1] / EARTH_RADIUS)
    lon = origin.lon0 + np.degrees(enu[..., 0] / (EARTH_RADIUS * np.cos(np.radians(origin.lat0))))
    lon = (lon + 180.0) % 360.0 - 180.0
    return lat, lon, enu[..., 2] + origin.alt0


@dataclass
class GnssConfig:
    """``accuracy`` is read as a 2-sigma horizontal radius."""

    vertical_factor: float = 3.0
    horizontal_only: bool = False
    chi2_threshold: float = None

    @property
    def threshold(self):
        if self.chi2_threshold is not None:
            return float(self.chi2_threshold)
        return CHI2_2DOF_95 if self.horizontal_only else CHI2_3DOF_95


def gnss_noise(fix, cfg=GnssConfig()):
    s = fix.accuracy / 2.0
    return np.diag([s * s, s * s, (cfg.vertical_factor * s) ** 2])


@dataclass
class GnssReport:
    accepted: bool
    innovation: np.ndarray
    S: np.ndarray
    nis: float


def ekf_update_gnss(x, fix, origin, cfg=GnssConfig()):
    """Gated linear position update.  Returns ``(state, report)``."""
    y = fix_to_enu(fix, origin)
    R = gnss_noise(fix, cfg)
    rows = [0, 1] if cfg.horizontal_only else [0, 1, 2]
    H = np.zeros((len(rows), STATE_DIM))
    H[np.arange(len(rows)), np.asarray(rows)] = 1.0
    R = R[np.ix_(rows, rows)]
    v = y[rows] - x.mean[P_SLICE][rows]
    PHt = x.cov @ H.T
    S = H @ PHt + R
    S = 0.5 * (S + S.T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("GNSS innovation covariance is not positive definite") from exc
    w = np.linalg.solve(L, v)
    nis = float(w @ w)
    if nis > cfg.threshold:
        return x, GnssReport(False, v, S, nis)
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    m = x.mean + K @ v
    D = np.eye(STATE_DIM) - K @ H
    P = D @ x.cov @ D.T + K @ R @ K.T
    return StateEstimate(m, 0.5 * (P + P.T)), GnssReport(True, v, S, nis)
