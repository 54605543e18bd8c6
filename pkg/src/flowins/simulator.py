"""Synthetic ground truth and sensor streams.

Trajectories are analytic (or cubic splines through waypoints) with exact
derivatives, plus a small vertical bob at walking cadence.  The body stays
level with its x axis along the horizontal velocity.  Landmarks fill a corridor around the path and the camera sees
them through a pinhole model.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .dataset import Dataset, ImuStream, InitialPose
from .flow_fusion import FlowField, Provenance
from .geometry import forward_camera
from .gnss import EnuOrigin, GnssFix, enu_to_wgs

KINDS = ("circle", "figure_eight", "straight", "recorded_waypoints")
DEFAULT_GRAVITY = np.array([0.0, 0.0, 9.81])
DEFAULT_ORIGIN = EnuOrigin(47.0, 8.0, 400.0)


@dataclass
class TrajectorySpec:
    kind: str = "circle"
    duration: float = 300.0
    speed: float = 1.2
    imu_rate: float = 100.0
    frame_rate: float = 10.0
    camera_pitch: float = 10.0
    waypoints: np.ndarray = None
    bob_amplitude: float = 0.02
    step_frequency: float = 1.8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not (self.duration > 0 and self.imu_rate > 0 and self.frame_rate > 0):
            raise ValueError("duration and rates must be positive")
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if self.bob_amplitude < 0 or not self.step_frequency > 0:
            raise ValueError("bob_amplitude must be >= 0 and step_frequency > 0")
        if self.kind == "recorded_waypoints":
            if self.waypoints is None:
                raise ValueError("recorded_waypoints needs waypoints")
            w = np.asarray(self.waypoints, dtype=float)
            if w.ndim != 2 or w.shape[1] not in (2, 3) or len(w) < 4:
                raise ValueError("waypoints must be an (N>=4, 2|3) array")
            if w.shape[1] == 2:
                w = np.column_stack([w, np.zeros(len(w))])
            self.waypoints = w

    @property
    def path_length(self):
        return self.speed * self.duration


@dataclass
class NoiseSpec:
    accel_noise_std: float = 0.02
    gyro_noise_std: float = 1e-3
    accel_bias: np.ndarray = field(default_factory=lambda: np.array([0.05, -0.04, 0.03]))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.array([1e-3, -1.5e-3, 2e-3]))
    accel_scale: np.ndarray = field(default_factory=lambda: np.array([1.01, 0.99, 1.005]))
    flow_noise_std: float = 0.5
    flow_var_reported: float = 0.25
    gnss_std: float = 2.5
    gnss_rate: float = 1.0
    outlier_fraction: float = 0.0
    outlier_px: float = 50.0
    seed: int = 0

    def __post_init__(self):
        for name in ("accel_bias", "gyro_bias", "accel_scale"):
            setattr(self, name, np.broadcast_to(np.asarray(getattr(self, name), float), (3,)).copy())
        for name in ("accel_noise_std", "gyro_noise_std", "flow_noise_std", "gnss_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.outlier_fraction <= 1:
            raise ValueError("outlier_fraction must lie in [0, 1]")
        if not self.flow_var_reported > 0:
            raise ValueError("flow_var_reported must be positive")
        if np.any(self.accel_scale <= 0):
            raise ValueError("accel_scale must be positive")

    @classmethod
    def noiseless(cls, **kw):
        base = dict(accel_noise_std=0.0, gyro_noise_std=0.0, accel_bias=0.0, gyro_bias=0.0,
                    accel_scale=1.0, flow_noise_std=0.0, gnss_std=0.0, outlier_fraction=0.0)
        base.update(kw)
        return cls(**base)


# --------------------------------------------------------------------------
# ground truth


def _circle(spec, t):
    r = spec.speed * spec.duration / (2 * np.pi)
    w = spec.speed / r
    th = w * t
    s, c = np.sin(th), np.cos(th)
    z = np.zeros_like(t)
    p = np.column_stack([r * s, r * (1 - c), z])
    v = spec.speed * np.column_stack([c, s, z])
    a = spec.speed * w * np.column_stack([-s, c, z])
    return p, v, a


def _figure_eight(spec, t):
    # x = A sin(phi), y = (A/2) sin(2 phi); A matches the mean speed
    phi_dot = 2 * np.pi / spec.duration
    u = np.linspace(0, 2 * np.pi, 4001)
    mean_unit = np.mean(np.hypot(np.cos(u), np.cos(2 * u)))
    A = spec.speed / (phi_dot * mean_unit)
    ph = phi_dot * t
    z = np.zeros_like(t)
    p = np.column_stack([A * np.sin(ph), 0.5 * A * np.sin(2 * ph), z])
    v = A * phi_dot * np.column_stack([np.cos(ph), np.cos(2 * ph), z])
    a = A * phi_dot ** 2 * np.column_stack([-np.sin(ph), -2 * np.sin(2 * ph), z])
    return p, v, a


def _straight(spec, t):
    z = np.zeros_like(t)
    p = np.column_stack([spec.speed * t, z, z])
    v = np.column_stack([np.full_like(t, spec.speed), z, z])
    return p, v, np.zeros_like(p)


def _waypoints(spec, t):
    w = spec.waypoints
    seg = np.linalg.norm(np.diff(w, axis=0), axis=1)
    if np.any(seg <= 0):
        raise ValueError("consecutive waypoints must differ")
    knots = np.r_[0.0, np.cumsum(seg)] / seg.sum() * spec.duration
    closed = np.allclose(w[0], w[-1])
    cs = CubicSpline(knots, w, axis=0, bc_type="periodic" if closed else "natural")
    p, v, a = cs(t), cs(t, 1), cs(t, 2)
    if np.any(np.hypot(v[:, 0], v[:, 1]) < 1e-6):
        raise ValueError("waypoint spline stops; heading undefined")
    return p, v, a


_PATHS = {"circle": _circle, "figure_eight": _figure_eight, "straight": _straight,
          "recorded_waypoints": _waypoints}


def _add_bob(spec, t, p, v, a):
    """Vertical sinusoid at step cadence; without it speed is barely observable."""
    if spec.bob_amplitude == 0:
        return p, v, a
    w = 2 * np.pi * spec.step_frequency
    amp = spec.bob_amplitude
    p, v, a = p.copy(), v.copy(), a.copy()
    p[:, 2] += amp * np.sin(w * t)
    v[:, 2] += amp * w * np.cos(w * t)
    a[:, 2] -= amp * w * w * np.sin(w * t)
    return p, v, a


def _yaw_quaternions(psi):
    return np.column_stack([np.cos(psi / 2), np.zeros_like(psi), np.zeros_like(psi),
                            np.sin(psi / 2)])


@dataclass
class GroundTruth:
    """Truth sampled at IMU rate.  ``omega`` is the body angular rate."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    frame_idx: np.ndarray
    spec: TrajectorySpec = None

    @property
    def frame_times(self):
        return self.t[self.frame_idx]

    def trajectory(self):
        from .trajectory import TrajectoryEstimate
        return TrajectoryEstimate(self.t, self.p, self.q, self.v, label="truth")


def generate_truth(spec):
    """Analytic trajectory sampled at ``imu_rate``, with frame indices."""
    n = int(round(spec.duration * spec.imu_rate))
    t = np.arange(n + 1) / spec.imu_rate
    p, v, a = _PATHS[spec.kind](spec, t)
    p, v, a = _add_bob(spec, t, p, v, a)
    psi = np.unwrap(np.arctan2(v[:, 1], v[:, 0]))
    vh2 = v[:, 0] ** 2 + v[:, 1] ** 2
    yaw_rate = (v[:, 0] * a[:, 1] - v[:, 1] * a[:, 0]) / vh2
    omega = np.column_stack([np.zeros(n + 1), np.zeros(n + 1), yaw_rate])
    step = spec.imu_rate / spec.frame_rate
    frame_idx = np.unique(np.round(np.arange(0, n + 1e-9, step)).astype(np.int64))
    frame_idx = frame_idx[frame_idx <= n]
    return GroundTruth(t, p, v, a, _yaw_quaternions(psi), omega, frame_idx, spec)


# --------------------------------------------------------------------------
# world


@dataclass
class MovingPoint:
    position: np.ndarray
    velocity: np.ndarray

    def at(self, t):
        return np.asarray(self.position, float) + np.asarray(self.velocity, float) * t


@dataclass
class WorldModel:
    landmarks: np.ndarray
    outlier_objects: list = field(default_factory=list)
    max_depth: float = 30.0
    min_depth: float = 1.0

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        self._tree = None

    def near(self, center, radius):
        """Sorted indices of landmarks within ``radius`` of ``center``."""
        if self._tree is None:
            self._tree = cKDTree(self.landmarks)
        return np.asarray(self._tree.query_ball_point(center, radius, return_sorted=True),
                          dtype=np.int64)


def generate_world(truth, rng, density=20.0, lateral=(1.5, 12.0), height=(-1.5, 4.0),
                   lookahead=35.0):
    """Landmarks in a corridor around the horizontal path.

    ``density`` is landmarks per metre of path.  The corridor is extended
    ``lookahead`` metres past the end so the last frames see a scene.
    """
    p = truth.p
    ds = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(ds)]
    length = s[-1]
    n = max(int(density * (length + lookahead)), 200)
    st = rng.uniform(0.0, length + lookahead, n)
    tang = truth.v / np.linalg.norm(truth.v, axis=1, keepdims=True)
    idx = np.clip(np.searchsorted(s, np.minimum(st, length)), 0, len(s) - 1)
    base = p[idx] + tang[idx] * np.maximum(st - length, 0.0)[:, None]
    th = np.arctan2(tang[idx, 1], tang[idx, 0])
    normal = np.column_stack([-np.sin(th), np.cos(th), np.zeros(n)])
    off = rng.uniform(*lateral, n) * rng.choice([-1.0, 1.0], n)
    along = rng.uniform(-0.5, 0.5, n)
    z = rng.uniform(*height, n)
    pts = base + normal * off[:, None] + tang[idx] * along[:, None]
    pts[:, 2] = base[:, 2] + z
    return WorldModel(pts)


# --------------------------------------------------------------------------
# sensors


def _rotation_matrices(q):
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def _rotvec_between(q0, q1):
    """Rotation vector of ``conj(q0) * q1`` for each row."""
    w0, v0 = q0[:, 0], q0[:, 1:]
    w1, v1 = q1[:, 0], q1[:, 1:]
    w = w0 * w1 + np.sum(v0 * v1, axis=1)
    v = w0[:, None] * v1 - w1[:, None] * v0 - np.cross(v0, v1)
    sgn = np.where(w < 0, -1.0, 1.0)
    w, v = w * sgn, v * sgn[:, None]
    nv = np.linalg.norm(v, axis=1)
    ang = 2 * np.arctan2(nv, w)
    scale = np.where(nv > 1e-12, ang / np.where(nv > 1e-12, nv, 1.0), 2.0)
    return v * scale[:, None]


def synthesize_imu(truth, noise, rng=None, g=DEFAULT_GRAVITY, scale_model="inverse",
                   mode="increment"):
    """Accelerometer and gyro streams that invert the filter's corrections.

    ``mode="increment"`` derives sample ``k`` from the sampled truth positions
    so noiseless data mechanizes back onto them exactly;
    ``"analytic"`` uses the instantaneous derivatives at ``t[k]``.
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(noise.seed))
    t = truth.t
    n = len(t)
    R = _rotation_matrices(truth.q)
    g = np.asarray(g, dtype=float)
    if mode == "increment":
        dt = np.diff(t)
        # the discrete position update uses the previous velocity, so the
        # velocity that reproduces the sampled positions is the forward difference
        vf = np.empty((n, 3))
        vf[:-1] = np.diff(truth.p, axis=0) / dt[:, None]
        vf[-1] = truth.v[-1] + 0.5 * truth.a[-1] * dt[-1] if n > 1 else truth.v[-1]
        acc_w = np.empty((n, 3))
        acc_w[1:] = np.diff(vf, axis=0) / dt[:, None]
        acc_w[0] = truth.a[0]
        omega = np.empty((n, 3))
        omega[1:] = _rotvec_between(truth.q[:-1], truth.q[1:]) / dt[:, None]
        omega[0] = truth.omega[0]
    elif mode == "analytic":
        acc_w, omega = truth.a, truth.omega
    else:
        raise ValueError("mode must be 'increment' or 'analytic'")
    f = np.einsum("nji,nj->ni", R, acc_w + g)
    if scale_model == "inverse":
        acc = noise.accel_scale * f + noise.accel_bias
    elif scale_model == "multiply":
        acc = (f + noise.accel_bias) / noise.accel_scale
    else:
        raise ValueError("scale_model must be 'inverse' or 'multiply'")
    acc = acc + rng.normal(0.0, 1.0, (n, 3)) * noise.accel_noise_std
    gyr = omega + noise.gyro_bias + rng.normal(0.0, 1.0, (n, 3)) * noise.gyro_noise_std
    return ImuStream(t, acc, gyr)


def _camera_frame(p, q, cam):
    R = _rotation_matrices(q[None])[0]
    Rc = R @ cam.R_imu_cam
    c = p + R @ cam.t_imu_cam
    return Rc, c


def _project_points(X, Rc, c, cam):
    Xc = (X - c) @ Rc
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * Xc[:, 0] / z + cam.cx
        v = cam.fy * Xc[:, 1] / z + cam.cy
    return u, v, z


def synthesize_flow(truth, world, cam, noise, k1, k2, rng=None):
    """Flow between IMU samples ``k1`` and ``k2`` of the truth.

    Points are landmarks seen in both frames with depth in the world's
    range.  A fraction of them is replaced by points on moving objects
    whose velocity shifts the second projection by ``noise.outlier_px``.
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(noise.seed))
    t1, t2 = truth.t[k1], truth.t[k2]
    R1, c1 = _camera_frame(truth.p[k1], truth.q[k1], cam)
    R2, c2 = _camera_frame(truth.p[k2], truth.q[k2], cam)
    X = world.landmarks
    # anything visible in view 1 lies within max_depth times the corner ray length
    reach = world.max_depth * np.sqrt(1 + (max(cam.cx, cam.image_width - cam.cx) / cam.fx) ** 2
                                      + (max(cam.cy, cam.image_height - cam.cy) / cam.fy) ** 2)
    near = world.near(c1, 1.01 * reach)
    Xn = X[near]
    u1, v1, z1 = _project_points(Xn, R1, c1, cam)
    u2, v2, z2 = _project_points(Xn, R2, c2, cam)
    ok = ((z1 > world.min_depth) & (z2 > world.min_depth) & (z1 < world.max_depth)
          & (z2 < world.max_depth) & cam.in_bounds(u1, v1) & cam.in_bounds(u2, v2))
    sub = np.flatnonzero(ok)
    idx = near[sub]
    u1, v1, u2, v2, z1 = u1[sub], v1[sub], u2[sub], v2[sub], z1[sub]
    outlier = np.zeros(len(idx), dtype=bool)

    n_out = int(round(noise.outlier_fraction * len(idx)))
    if n_out:
        pick = rng.choice(len(idx), n_out, replace=False)
        ang = rng.uniform(0, 2 * np.pi, n_out)
        dt = t2 - t1
        # velocity in the second camera's image plane, sized for the pixel shift
        dirs = np.cos(ang)[:, None] * R2[:, 0] + np.sin(ang)[:, None] * R2[:, 1]
        vel = dirs * (noise.outlier_px * z1[pick] / cam.fx / dt)[:, None]
        mu, mv, mz = _project_points(X[idx[pick]] + vel * dt, R2, c2, cam)
        good = mz > world.min_depth
        u2[pick[good]] = mu[good]
        v2[pick[good]] = mv[good]
        outlier[pick[good]] = True

    for obj in world.outlier_objects:
        a = obj.at(t1)[None]
        b = obj.at(t2)[None]
        ou1, ov1, oz1 = _project_points(a, R1, c1, cam)
        ou2, ov2, oz2 = _project_points(b, R2, c2, cam)
        if oz1[0] > world.min_depth and oz2[0] > world.min_depth and cam.in_bounds(ou1, ov1)[0]:
            u1, v1 = np.r_[u1, ou1], np.r_[v1, ov1]
            u2, v2 = np.r_[u2, ou2], np.r_[v2, ov2]
            outlier = np.r_[outlier, True]

    n = len(u1)
    du = u2 - u1 + rng.normal(0.0, 1.0, n) * noise.flow_noise_std
    dv = v2 - v1 + rng.normal(0.0, 1.0, n) * noise.flow_noise_std
    var = np.full(n, noise.flow_var_reported)
    pts = np.column_stack([u1, v1, du, dv, var, var])
    order = np.lexsort((u1, v1))
    return FlowField(t1, t2, cam.image_width, cam.image_height, pts[order],
                     Provenance.SYNTHETIC, dense=False, outlier=outlier[order])


def synthesize_gnss(truth, origin, noise, rng=None):
    """Fixes at ``gnss_rate`` from the first truth sample, radius ``2 * gnss_std``."""
    if rng is None:
        rng = np.random.Generator(np.random.Philox(noise.seed))
    if not noise.gnss_rate > 0:
        return []
    t = truth.t
    times = np.arange(t[0], t[-1] + 1e-9, 1.0 / noise.gnss_rate)
    idx = np.unique(np.clip(np.searchsorted(t, times - 1e-9), 0, len(t) - 1))
    sd = noise.gnss_std * np.array([1.0, 1.0, 3.0])
    enu = truth.p[idx] + rng.normal(0.0, 1.0, (len(idx), 3)) * sd
    lat, lon, alt = enu_to_wgs(enu, origin)
    radius = 2.0 * noise.gnss_std if noise.gnss_std > 0 else 1e-3
    return [GnssFix(float(t[k]), float(a), float(b), float(c), radius)
            for k, a, b, c in zip(idx, lat, lon, alt)]


def simulate_dataset(spec=None, noise=None, cam=None, origin=DEFAULT_ORIGIN,
                     world_density=40.0, scale_model="inverse", g=DEFAULT_GRAVITY):
    """Full synthetic session with independent seeded substreams per sensor."""
    spec = TrajectorySpec() if spec is None else spec
    noise = NoiseSpec() if noise is None else noise
    cam = forward_camera(spec.camera_pitch) if cam is None else cam
    ss_world, ss_imu, ss_flow, ss_gnss = np.random.SeedSequence(noise.seed).spawn(4)
    gen = lambda ss: np.random.Generator(np.random.Philox(ss))
    truth = generate_truth(spec)
    world = generate_world(truth, gen(ss_world), density=world_density)
    imu = synthesize_imu(truth, noise, gen(ss_imu), g=g, scale_model=scale_model)
    fi = truth.frame_idx
    frame_seeds = ss_flow.spawn(max(len(fi) - 1, 0))
    frames = [synthesize_flow(truth, world, cam, noise, fi[j], fi[j + 1], gen(frame_seeds[j]))
              for j in range(len(fi) - 1)]
    gnss = synthesize_gnss(truth, origin, noise, gen(ss_gnss))
    init = InitialPose(truth.t[0], truth.p[0], truth.v[0], truth.q[0])
    meta = {"kind": spec.kind, "duration": spec.duration, "speed": spec.speed,
            "seed": noise.seed, "path_length": spec.path_length}
    return Dataset(imu, frames, gnss, cam, origin, init, truth, meta, world)
