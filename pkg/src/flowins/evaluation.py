"""Track evaluation, ablation tables and plots."""

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import DegenerateAlignment, EmptyOverlap
from .gnss import fix_to_enu
from .pipeline import TABLE_CONFIGS, FilterSettings, run_filter
from .trajectory import TrajectoryEstimate, _from_scipy, _to_scipy

TIME_TOL = 1e-9


def _as_track(x):
    if isinstance(x, TrajectoryEstimate):
        return x
    if hasattr(x, "trajectory"):
        return x.trajectory()
    raise TypeError(f"cannot read a trajectory from {type(x).__name__}")


def common_positions(est, truth):
    """Positions of both tracks at shared timestamps.

    The denser track is linearly interpolated onto the timestamps of the
    sparser one that fall inside both time spans.
    """
    est, truth = _as_track(est), _as_track(truth)
    if len(est) == 0 or len(truth) == 0:
        raise EmptyOverlap("empty trajectory")
    lo = max(est.times[0], truth.times[0]) - TIME_TOL
    hi = min(est.times[-1], truth.times[-1]) + TIME_TOL
    sparse, dense = (est, truth) if len(est) <= len(truth) else (truth, est)
    keep = (sparse.times >= lo) & (sparse.times <= hi)
    if not keep.any():
        raise EmptyOverlap("trajectories do not overlap in time")
    t = sparse.times[keep]
    _, first = np.unique(t, return_index=True)
    t = t[first]
    a = sparse.positions[keep][first]
    b = dense.at(t, attitude=False).positions
    return (t, a, b) if sparse is est else (t, b, a)


def _rigid_fit(A, B):
    """Rotation and translation minimizing ``sum |R a + t - b|^2``."""
    if len(A) < 3:
        raise DegenerateAlignment(f"need at least 3 points, got {len(A)}")
    ma, mb = A.mean(axis=0), B.mean(axis=0)
    Ac, Bc = A - ma, B - mb
    scale = max(np.abs(Ac).max(), np.abs(Bc).max(), 1e-300)
    if np.linalg.matrix_rank(Ac / scale, tol=1e-9) < 2:
        raise DegenerateAlignment("estimated track is collinear")
    U, _, Vt = np.linalg.svd(Ac.T @ Bc)
    # reflection guard
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mb - R @ ma


def procrustes_align(est, truth):
    """Rigidly align ``est`` onto ``truth``.  Returns ``(aligned, R, t)``.

    ``aligned`` carries the estimate's own timestamps; attitudes and
    velocities are rotated along with the positions.
    """
    est = _as_track(est)
    _, A, B = common_positions(est, truth)
    R, t = _rigid_fit(A, B)
    q = None
    if est.quaternions is not None:
        q = _from_scipy(Rotation.from_matrix(R) * _to_scipy(est.quaternions))
    vel = None if est.velocities is None else est.velocities @ R.T
    cov = None
    if est.position_cov is not None:
        cov = np.einsum("ij,njk,lk->nil", R, est.position_cov, R)
    aligned = TrajectoryEstimate(est.times, est.positions @ R.T + t, q, vel, cov, est.label)
    return aligned, R, t


def rmse(est, truth):
    """Root mean squared 3-D position error over the shared timestamps."""
    _, A, B = common_positions(est, truth)
    return float(np.sqrt(np.mean(np.sum((A - B) ** 2, axis=1))))


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    config: object
    filter_rmse: float
    smoother_rmse: float
    filter_rmse_raw: float
    smoother_rmse_raw: float
    filter_track: TrajectoryEstimate = None
    smoother_track: TrajectoryEstimate = None
    seconds: float = 0.0
    meta: dict = field(default_factory=dict)


@dataclass
class AblationResults:
    rows: list
    truth: TrajectoryEstimate = None
    gnss: np.ndarray = None
    gnss_radius: np.ndarray = None
    path_length: float = None

    def __len__(self):
        return len(self.rows)

    def table(self):
        """Result table as CSV text.  Timing is left out so output is reproducible."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "gnss", "dense_flow", "sparse_flow", "uncertainty",
                    "filter_rmse", "smoother_rmse", "filter_rmse_unaligned",
                    "smoother_rmse_unaligned"])
        for r in self.rows:
            c = r.config
            w.writerow([c.label, int(c.use_gnss), int(c.use_dense_flow), int(c.use_sparse_flow),
                        int(c.use_flow and c.use_flow_uncertainty),
                        f"{r.filter_rmse:.6f}", f"{r.smoother_rmse:.6f}",
                        f"{r.filter_rmse_raw:.6f}", f"{r.smoother_rmse_raw:.6f}"])
        return buf.getvalue()


def _load(dataset):
    if isinstance(dataset, (str, Path)):
        from .flowio import read_dataset
        return read_dataset(dataset)
    return dataset


def _truth_track(dataset):
    tr = dataset.truth
    if tr is None:
        return None
    return tr.trajectory() if hasattr(tr, "trajectory") else _as_track(tr)


def run_ablation(dataset, configs=TABLE_CONFIGS, settings=None, truth=None, keep_tracks=True):
    """Filter and smooth ``dataset`` once per configuration.

    ``dataset`` may be a :class:`~flowins.dataset.Dataset` or a manifest
    path.  Rows keep the order of ``configs``.
    """
    dataset = _load(dataset)
    settings = FilterSettings() if settings is None else settings
    truth = _truth_track(dataset) if truth is None else _as_track(truth)
    if truth is None:
        raise ValueError("ablation needs a ground-truth track")
    rows = []
    for cfg in configs:
        t0 = time.perf_counter()
        res = run_filter(dataset, cfg, settings)
        ftrack = res.track()
        strack = res.smooth().trajectory()
        ftrack.label = strack.label = cfg.label
        fa, _, _ = procrustes_align(ftrack, truth)
        sa, _, _ = procrustes_align(strack, truth)
        n_acc = sum(r.accepted for r in res.field_reports) if res.field_reports else 0
        rows.append(AblationRow(cfg, rmse(fa, truth), rmse(sa, truth),
                                rmse(ftrack, truth), rmse(strack, truth),
                                fa if keep_tracks else None, sa if keep_tracks else None,
                                time.perf_counter() - t0, {"flow_accepted": n_acc}))
    gnss = radius = None
    if dataset.gnss and dataset.origin is not None:
        gnss = np.array([fix_to_enu(f, dataset.origin) for f in dataset.gnss])
        radius = np.array([f.accuracy for f in dataset.gnss])
    length = dataset.meta.get("path_length")
    return AblationResults(rows, truth, gnss, radius, None if length is None else float(length))


def _slug(label):
    return label.lower().replace("+", "_")


def emit_plots(results, out_dir):
    """Write one SVG track plot per row and ``results.csv``.  Returns the paths."""
    if results is None or len(results) == 0:
        raise ValueError("no results to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Circle

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in results.rows:
        fig, ax = plt.subplots(figsize=(6, 6))
        if results.gnss is not None and r.config.use_gnss:
            for (e, n, _), rad in zip(results.gnss, results.gnss_radius):
                ax.add_patch(Circle((e, n), rad, fill=False, lw=0.4, color="0.6"))
        if results.truth is not None:
            ax.plot(results.truth.positions[:, 0], results.truth.positions[:, 1], "k-", lw=1,
                    label="truth")
        if r.filter_track is not None:
            ax.plot(r.filter_track.positions[:, 0], r.filter_track.positions[:, 1], "-",
                    color="tab:blue", lw=1, label=f"filter {r.filter_rmse:.2f} m")
        if r.smoother_track is not None:
            ax.plot(r.smoother_track.positions[:, 0], r.smoother_track.positions[:, 1], "-",
                    color="tab:red", lw=1, label=f"smoother {r.smoother_rmse:.2f} m")
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("east [m]")
        ax.set_ylabel("north [m]")
        ax.set_title(r.config.label)
        ax.legend(loc="best", fontsize=8)
        path = out / f"track_{_slug(r.config.label)}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    table = out / "results.csv"
    table.write_text(results.table())
    paths.append(table)
    return paths
