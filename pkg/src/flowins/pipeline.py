"""Filter session: runs prediction and updates over a merged sensor timeline."""

from dataclasses import dataclass, field, replace

import numpy as np

from .flow_fusion import (NUGGET, SIGMA_P0, SIGMA_Q0, FieldReport, FlowField, GatingConfig,
                          augment_pose, forget_pose, process_flow_field)
from .flowio import align_streams
from .gnss import EnuOrigin, GnssConfig, ekf_update_gnss
from .ins import (CORE_DIM, STATE_DIM, ProcessNoiseConfig, StateEstimate, StatePrior,
                  _compose_top, _predict, initial_state, initialize_stationary, mechanize)
from .smoother import FilterHistory, rts_smooth_states

TIME_TOL = 1e-6


@dataclass(frozen=True)
class AblationConfig:
    """Which aiding sources a run uses.  Dense and sparse flow are exclusive."""

    use_gnss: bool = False
    use_dense_flow: bool = False
    use_sparse_flow: bool = False
    use_flow_uncertainty: bool = True

    def __post_init__(self):
        if self.use_dense_flow and self.use_sparse_flow:
            raise ValueError("dense and sparse flow are mutually exclusive")

    @property
    def use_flow(self):
        return self.use_dense_flow or self.use_sparse_flow

    @property
    def label(self):
        parts = ["INS"]
        if self.use_gnss:
            parts.append("GNSS")
        if self.use_sparse_flow:
            parts.append("sparse")
        if self.use_dense_flow:
            parts.append("dense")
        if self.use_flow and self.use_flow_uncertainty:
            parts.append("unc")
        return "+".join(parts)


TABLE_CONFIGS = (
    AblationConfig(),
    AblationConfig(use_gnss=True),
    AblationConfig(use_sparse_flow=True, use_flow_uncertainty=False),
    AblationConfig(use_dense_flow=True),
    AblationConfig(use_gnss=True, use_sparse_flow=True, use_flow_uncertainty=False),
    AblationConfig(use_gnss=True, use_dense_flow=True),
)


@dataclass
class FilterSettings:
    process: ProcessNoiseConfig = field(default_factory=ProcessNoiseConfig)
    prior: StatePrior = field(default_factory=StatePrior)
    gate: GatingConfig = field(default_factory=GatingConfig)
    gnss: GnssConfig = field(default_factory=GnssConfig)
    sigma_p0: float = SIGMA_P0
    sigma_q0: float = SIGMA_Q0
    nugget: float = NUGGET
    sparse_points: int = 30
    init: str = "known"
    standstill: float = 2.0
    decimate: bool = True

    def __post_init__(self):
        if self.init not in ("known", "stationary"):
            raise ValueError("init must be 'known' or 'stationary'")


@dataclass
class FilterResult:
    history: FilterHistory
    final: StateEstimate
    config: AblationConfig
    field_reports: list = field(default_factory=list)
    gnss_reports: list = field(default_factory=list)

    def track(self):
        return self.history.trajectory()

    def smooth(self):
        return rts_smooth_states(self.history)


def sparse_subsample(fld, n):
    """The ``n`` points with the largest flow magnitude, kept in input order."""
    if len(fld) <= n:
        return fld
    mag = np.hypot(fld.points[:, 2], fld.points[:, 3])
    keep = np.sort(np.argsort(-mag, kind="stable")[:n])
    out = fld.outlier[keep] if fld.outlier is not None else None
    return FlowField(fld.t1, fld.t2, fld.width, fld.height, fld.points[keep],
                     fld.provenance, dense=False, outlier=out)


def constant_variance(fld):
    """Replace per-point variances by their field medians."""
    if len(fld) == 0:
        return fld
    pts = fld.points.copy()
    pts[:, 4] = np.median(pts[:, 4])
    pts[:, 5] = np.median(pts[:, 5])
    return replace(fld, points=pts)


def prepare_field(fld, config, settings):
    if config.use_sparse_flow:
        fld = sparse_subsample(fld, settings.sparse_points)
    if not config.use_flow_uncertainty:
        fld = constant_variance(fld)
    return fld


def _initial(dataset, settings):
    if settings.init == "known" and dataset.init is not None:
        i = dataset.init
        return i.t, initial_state(i.p, i.v, i.q, settings.prior)
    imu = dataset.imu
    t0 = imu.t[0]
    stop = np.searchsorted(imu.t, t0 + settings.standstill, side="right")
    x = initialize_stationary([imu[k] for k in range(stop)], settings.process, settings.prior,
                              min_standstill=settings.standstill - 1e-9)
    return imu.t[stop - 1], x


FORGET_F = np.diag(np.r_[np.ones(CORE_DIM), np.zeros(STATE_DIM - CORE_DIM)])


def run_filter(dataset, config=AblationConfig(), settings=None, monitor=None):
    """Filter a dataset.  ``monitor(t, tag, mean, cov)`` sees every posterior.

    Without flow the augmented pose is left untouched, so the all-disabled
    configuration is plain dead reckoning.
    """
    settings = FilterSettings() if settings is None else settings
    cfg = settings.process
    imu = dataset.imu
    t, x = _initial(dataset, settings)
    m, P = x.mean.copy(), x.cov.copy()
    origin = dataset.origin
    if origin is None and dataset.gnss:
        origin = EnuOrigin.from_fix(dataset.gnss[0])
    hist = FilterHistory()
    hist.append(t, "init", None, m, P, m, P)
    result = FilterResult(hist, None, config)
    C = np.eye(STATE_DIM)
    pending = False
    last_pose_t = t
    sa, sw, g, mode = cfg.Sigma_a, cfg.Sigma_w, cfg.g, cfg.scale_mode

    for ev in align_streams(dataset):
        if ev.kind == "imu":
            k = ev.index
            tk = imu.t[k]
            if tk <= t:
                continue
            m, P, Ftop = _predict(m, P, imu.acc[k], imu.gyr[k], tk - t, sa, sw, g, mode)
            t = tk
            if settings.decimate:
                C = _compose_top(Ftop, C)
                pending = True
            else:
                F = np.eye(STATE_DIM)
                F[:10] = Ftop
                hist.append(t, "imu", F, m, P, m, P)
            if monitor is not None:
                monitor(t, "imu", m, P)
            continue
        if ev.t < hist.times[0] - TIME_TOL:
            continue
        if ev.kind == "flow":
            fld = dataset.frames[ev.index]
            if not config.use_flow:
                hist.append(t, "imu", C, m, P, m, P)
                C = np.eye(STATE_DIM)
                pending = False
                continue
            pred_m, pred_P = m, P
            state = StateEstimate(m, P)
            if abs(fld.t1 - last_pose_t) <= TIME_TOL:
                state, report = process_flow_field(state, prepare_field(fld, config, settings),
                                                   dataset.camera, settings.gate)
            else:
                # the stored past pose does not belong to this pair
                report = FieldReport(n_points=len(fld))
            result.field_reports.append(report)
            hist.append(t, "flow", C, pred_m, pred_P, state.mean, state.cov)
            if monitor is not None:
                monitor(t, "flow", state.mean, state.cov)
            forgotten = forget_pose(state, settings.sigma_p0, settings.sigma_q0)
            state = augment_pose(forgotten, settings.nugget)
            hist.append(t, "augment", FORGET_F, forgotten.mean, forgotten.cov,
                        state.mean, state.cov)
            if monitor is not None:
                monitor(t, "augment", state.mean, state.cov)
            m, P = state.mean, state.cov
            last_pose_t = fld.t2
            C = np.eye(STATE_DIM)
            pending = False
        elif ev.kind == "gnss" and config.use_gnss:
            state, report = ekf_update_gnss(StateEstimate(m, P), dataset.gnss[ev.index],
                                            origin, settings.gnss)
            result.gnss_reports.append(report)
            hist.append(t, "gnss", C, m, P, state.mean, state.cov)
            if monitor is not None:
                monitor(t, "gnss", state.mean, state.cov)
            m, P = state.mean, state.cov
            C = np.eye(STATE_DIM)
            pending = False

    if pending:
        hist.append(t, "imu", C, m, P, m, P)
    result.final = StateEstimate(m, P)
    return result


def dead_reckon(dataset, settings=None):
    """Mean-only strapdown integration from the initial state (times, means)."""
    settings = FilterSettings() if settings is None else settings
    imu = dataset.imu
    t, x = _initial(dataset, settings)
    m = x.mean.copy()
    times, means = [t], [m.copy()]
    for k in range(len(imu)):
        if imu.t[k] <= t:
            continue
        m = mechanize(m, imu[k], imu.t[k] - t, settings.process)
        m[6:10] /= np.sqrt(m[6:10] @ m[6:10])
        t = imu.t[k]
        times.append(t)
        means.append(m.copy())
    return np.array(times), np.array(means)
