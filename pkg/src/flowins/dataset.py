"""In-memory sensor streams for one recording session."""

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, forward_camera
from .gnss import EnuOrigin
from .ins import ImuSample


@dataclass
class ImuStream:
    """IMU samples as arrays.  Sample ``k`` covers ``(t[k-1], t[k]]``."""

    t: np.ndarray
    acc: np.ndarray
    gyr: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.acc = np.ascontiguousarray(self.acc, dtype=float).reshape(-1, 3)
        self.gyr = np.ascontiguousarray(self.gyr, dtype=float).reshape(-1, 3)
        if not len(self.t) == len(self.acc) == len(self.gyr):
            raise ValueError("IMU arrays differ in length")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k):
        return ImuSample(self.t[k], self.acc[k], self.gyr[k])

    def samples(self):
        return [self[k] for k in range(len(self))]

    @classmethod
    def from_samples(cls, samples):
        return cls([s.t for s in samples], [s.a_tilde for s in samples],
                   [s.w_tilde for s in samples])


@dataclass
class InitialPose:
    t: float
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.q = np.asarray(self.q, dtype=float).reshape(4)


@dataclass
class Dataset:
    """Everything a fusion run needs.  ``truth`` is optional."""

    imu: ImuStream
    frames: list = field(default_factory=list)
    gnss: list = field(default_factory=list)
    camera: CameraModel = field(default_factory=forward_camera)
    origin: EnuOrigin = None
    init: InitialPose = None
    truth: object = None
    meta: dict = field(default_factory=dict)
    world: object = None

    def __post_init__(self):
        if self.origin is None and self.gnss:
            self.origin = EnuOrigin.from_fix(self.gnss[0])
