"""Container for an estimated or true trajectory."""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import interp1d
from scipy.spatial.transform import Rotation, Slerp


def _to_scipy(q):
    q = np.asarray(q, dtype=float)
    return Rotation.from_quat(np.column_stack([q[:, 1], q[:, 2], q[:, 3], q[:, 0]]))


def _from_scipy(rot):
    x = rot.as_quat()
    q = np.column_stack([x[:, 3], x[:, 0], x[:, 1], x[:, 2]])
    q[q[:, 0] < 0] *= -1
    return q


@dataclass
class TrajectoryEstimate:
    """Time-stamped positions and attitudes (w, x, y, z body to world)."""

    times: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray = None
    velocities: np.ndarray = None
    position_cov: np.ndarray = None
    label: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions differ in length")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("trajectory times must be non-decreasing")
        if self.quaternions is not None:
            self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)

    def __len__(self):
        return len(self.times)

    def at(self, times, attitude=True):
        """Linear position (and slerp attitude) interpolation at ``times``.

        ``attitude=False`` skips the attitudes, which dominate the cost on
        long tracks.
        """
        times = np.asarray(times, dtype=float)
        if len(self.times) == 0 or times.min() < self.times[0] - 1e-9 \
                or times.max() > self.times[-1] + 1e-9:
            raise ValueError("requested times fall outside the trajectory")
        times = np.clip(times, self.times[0], self.times[-1])
        t, keep = np.unique(self.times, return_index=True)
        if len(t) == 1:
            pos = np.repeat(self.positions[keep], len(times), axis=0)
            quat = None
            if attitude and self.quaternions is not None:
                quat = np.repeat(self.quaternions[keep], len(times), 0)
            return TrajectoryEstimate(times, pos, quat, label=self.label)
        pos = interp1d(t, self.positions[keep], axis=0)(times)
        quat = None
        if attitude and self.quaternions is not None:
            quat = _from_scipy(Slerp(t, _to_scipy(self.quaternions[keep]))(times))
        return TrajectoryEstimate(times, pos, quat, label=self.label)
