"""Dataset file formats, stream alignment and MC-dropout flow statistics.

Formats
-------
IMU CSV      ``t,ax,ay,az,gx,gy,gz`` (SI units), header required.
GNSS CSV     ``t,lat,lon,alt,accuracy``, header required.
Truth CSV    ``t,px,py,pz,vx,vy,vz,qw,qx,qy,qz``, header required.
Flow binary  little-endian: magic ``OFL1``, u32 width, u32 height, f64 t1,
             f64 t2, u8 mode (0 dense, 1 sparse).  Dense: four f32 planes
             (du, dv, var_du, var_dv), row-major.  Sparse: u32 count, then
             count records of six f32 (u1, v1, du, dv, var_du, var_dv).
Manifest     ``key = value`` lines, ``#`` starts a comment.
History      NumPy ``.npz`` with times, tags, transitions (NaN where a record
             has none) and predicted/filtered moments.
"""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, ImuStream, InitialPose
from .exceptions import EmptyOverlap, InconsistentStack, ParseError
from .flow_fusion import FlowField, Provenance
from .geometry import CameraModel
from .gnss import EnuOrigin, GnssFix
from .smoother import FilterHistory
from .trajectory import TrajectoryEstimate

MAGIC = b"OFL1"
_HEADER = struct.Struct("<4sIIddB")
_COUNT = struct.Struct("<I")
DENSE, SPARSE = 0, 1
VAR_FLOOR = 0.01

IMU_COLUMNS = ["t", "ax", "ay", "az", "gx", "gy", "gz"]
GNSS_COLUMNS = ["t", "lat", "lon", "alt", "accuracy"]
TRUTH_COLUMNS = ["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz"]


def _fmt(x):
    return repr(float(x))


# --------------------------------------------------------------------------
# CSV


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _read_csv(path, columns):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, header row required", path, 1) from None
        if [h.strip() for h in header] != columns:
            raise ParseError(f"expected header {','.join(columns)}", path, 1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise ParseError(f"expected {len(columns)} fields, got {len(row)}", path, lineno)
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    data = np.array(rows, dtype=float).reshape(-1, len(columns))
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data).all(axis=1))[0]) + 2
        raise ParseError("non-finite value", path, bad)
    return data


def _check_increasing(t, path, strict=True):
    d = np.diff(t)
    bad = np.flatnonzero(d <= 0 if strict else d < 0)
    if len(bad):
        raise ParseError("timestamps are not monotonically increasing", path, int(bad[0]) + 3)


def write_imu_csv(path, imu):
    _write_csv(path, IMU_COLUMNS, np.column_stack([imu.t, imu.acc, imu.gyr]))


def read_imu_csv(path):
    d = _read_csv(path, IMU_COLUMNS)
    _check_increasing(d[:, 0], path)
    return ImuStream(d[:, 0], d[:, 1:4], d[:, 4:7])


def write_gnss_csv(path, fixes):
    _write_csv(path, GNSS_COLUMNS, [[f.t, f.lat, f.lon, f.alt, f.accuracy] for f in fixes])


def read_gnss_csv(path):
    d = _read_csv(path, GNSS_COLUMNS)
    _check_increasing(d[:, 0], path, strict=False)
    out = []
    for i, row in enumerate(d):
        try:
            out.append(GnssFix(*row))
        except ValueError as exc:
            raise ParseError(str(exc), path, i + 2) from None
    return out


def write_truth_csv(path, track):
    q = track.quaternions if track.quaternions is not None else np.tile([1.0, 0, 0, 0], (len(track), 1))
    v = track.velocities if track.velocities is not None else np.zeros((len(track), 3))
    _write_csv(path, TRUTH_COLUMNS, np.column_stack([track.times, track.positions, v, q]))


def read_truth_csv(path):
    d = _read_csv(path, TRUTH_COLUMNS)
    _check_increasing(d[:, 0], path, strict=False)
    return TrajectoryEstimate(d[:, 0], d[:, 1:4], d[:, 7:11], d[:, 4:7], label="truth")


# --------------------------------------------------------------------------
# flow binary


def encode_flow(field):
    """Bytes of a flow field in the ``OFL1`` format."""
    mode = DENSE if field.dense else SPARSE
    head = _HEADER.pack(MAGIC, field.width, field.height, field.t1, field.t2, mode)
    if mode == DENSE:
        planes = field.points[:, 2:6].T.astype("<f4")
        return head + planes.tobytes()
    body = field.points.astype("<f4")
    return head + _COUNT.pack(len(body)) + body.tobytes()


def decode_flow(data, path=None):
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise ParseError(f"truncated header: expected {_HEADER.size} bytes, got {len(data)}",
                         path, offset=0)
    magic, w, h, t1, t2, mode = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", path, offset=0)
    off = _HEADER.size
    if mode == DENSE:
        expected = off + 4 * 4 * w * h
        if len(data) != expected:
            kind = "truncated" if len(data) < expected else "trailing bytes in"
            raise ParseError(f"{kind} dense flow: expected {expected} bytes, got {len(data)}",
                             path, offset=min(len(data), expected))
        planes = np.frombuffer(data, "<f4", 4 * w * h, off).reshape(4, h * w).astype(float)
        vv, uu = np.mgrid[0:h, 0:w]
        pts = np.column_stack([uu.ravel(), vv.ravel(), planes.T])
        return FlowField(t1, t2, w, h, pts, Provenance.DENSE_NETWORK, dense=True)
    if mode == SPARSE:
        if len(data) < off + _COUNT.size:
            raise ParseError(f"truncated sparse flow: expected {off + _COUNT.size} bytes, "
                             f"got {len(data)}", path, offset=len(data))
        (n,) = _COUNT.unpack_from(data, off)
        off += _COUNT.size
        expected = off + 24 * n
        if len(data) != expected:
            kind = "truncated" if len(data) < expected else "trailing bytes in"
            raise ParseError(f"{kind} sparse flow: expected {expected} bytes, got {len(data)}",
                             path, offset=min(len(data), expected))
        pts = np.frombuffer(data, "<f4", 6 * n, off).reshape(n, 6).astype(float)
        return FlowField(t1, t2, w, h, pts, Provenance.SPARSE_SUBSAMPLE, dense=False)
    raise ParseError(f"unknown flow mode {mode}", path, offset=_HEADER.size - 1)


def write_flow(path, field):
    Path(path).write_bytes(encode_flow(field))


def read_flow(path):
    try:
        return decode_flow(Path(path).read_bytes(), path)
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc), path) from None


# --------------------------------------------------------------------------
# MC-dropout statistics


@dataclass
class FlowSampleStack:
    """``N_mc`` flow predictions for one frame pair; ``du``, ``dv`` are (N, H, W)."""

    du: np.ndarray
    dv: np.ndarray
    t1: float
    t2: float

    def __post_init__(self):
        self.du = np.asarray(self.du, dtype=float)
        self.dv = np.asarray(self.dv, dtype=float)
        if self.du.ndim != 3 or self.du.shape != self.dv.shape:
            raise InconsistentStack("du and dv must share an (N, H, W) shape")
        if self.du.shape[0] < 2:
            raise InconsistentStack("need at least two samples")

    @property
    def n_mc(self):
        return self.du.shape[0]

    @classmethod
    def from_fields(cls, fields):
        fields = list(fields)
        if len(fields) < 2:
            raise InconsistentStack("need at least two samples")
        f0 = fields[0]
        for f in fields:
            if not f.dense:
                raise InconsistentStack("stack samples must be dense fields")
            if (f.width, f.height) != (f0.width, f0.height):
                raise InconsistentStack("stack samples differ in size")
            if (f.t1, f.t2) != (f0.t1, f0.t2):
                raise InconsistentStack("stack samples differ in timestamps")
        du = np.stack([f.points[:, 2].reshape(f.height, f.width) for f in fields])
        dv = np.stack([f.points[:, 3].reshape(f.height, f.width) for f in fields])
        return cls(du, dv, f0.t1, f0.t2)


def flow_variance_from_stack(stack, var_floor=VAR_FLOOR):
    """Per-pixel mean flow and per-component sample variance (ddof 1), floored."""
    n, h, w = stack.du.shape
    mu = stack.du.mean(axis=0)
    mv = stack.dv.mean(axis=0)
    vu = np.maximum(stack.du.var(axis=0, ddof=1), var_floor)
    vv = np.maximum(stack.dv.var(axis=0, ddof=1), var_floor)
    return FlowField.from_dense(mu, mv, vu, vv, stack.t1, stack.t2)


# --------------------------------------------------------------------------
# stream alignment


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    index: int


_RANK = {"imu": 0, "flow": 1, "gnss": 2}


def align_streams(dataset):
    """Chronological event list; ties resolve as imu, flow, gnss, then index.

    Flow events are stamped with the second frame time of their pair.
    """
    imu_t = np.asarray(dataset.imu.t, dtype=float)
    if len(imu_t) == 0:
        raise EmptyOverlap("no IMU samples")
    lo, hi = imu_t[0], imu_t[-1]
    flow_t = np.array([f.t2 for f in dataset.frames], dtype=float)
    gnss_t = np.array([g.t for g in dataset.gnss], dtype=float)
    for name, t in (("flow", flow_t), ("GNSS", gnss_t)):
        if len(t) and (t.max() < lo or t.min() > hi):
            raise EmptyOverlap(f"{name} timestamps do not overlap the IMU range")
    times = np.concatenate([imu_t, flow_t, gnss_t])
    ranks = np.concatenate([np.zeros(len(imu_t)), np.ones(len(flow_t)), np.full(len(gnss_t), 2)])
    index = np.concatenate([np.arange(len(imu_t)), np.arange(len(flow_t)), np.arange(len(gnss_t))])
    order = np.lexsort((index, ranks, times))
    kinds = ("imu", "flow", "gnss")
    return [Event(float(times[i]), kinds[int(ranks[i])], int(index[i])) for i in order]


# --------------------------------------------------------------------------
# manifest


def _floats(text):
    return [float(x) for x in text.replace(",", " ").split()]


def read_manifest(path):
    """Parse ``key = value`` lines into a dict of strings."""
    path = Path(path)
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path, lineno)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        out[key] = value
    return out


def write_manifest(path, entries):
    lines = ["# flowins dataset manifest"]
    lines += [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _camera_entries(cam):
    return {
        "camera.fx": _fmt(cam.fx), "camera.fy": _fmt(cam.fy),
        "camera.cx": _fmt(cam.cx), "camera.cy": _fmt(cam.cy),
        "camera.width": str(int(cam.image_width)), "camera.height": str(int(cam.image_height)),
        "camera.R_imu_cam": " ".join(_fmt(x) for x in cam.R_imu_cam.ravel()),
        "camera.t_imu_cam": " ".join(_fmt(x) for x in cam.t_imu_cam),
    }


def write_dataset(dataset, out_dir):
    """Write every stream of a dataset and return the manifest path."""
    out = Path(out_dir)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    entries = {"imu": "imu.csv", "flow_dir": "flow"}
    write_imu_csv(out / "imu.csv", dataset.imu)
    for j, f in enumerate(dataset.frames):
        write_flow(out / "flow" / f"frame_{j:06d}.ofl", f)
    if dataset.gnss:
        write_gnss_csv(out / "gnss.csv", dataset.gnss)
        entries["gnss"] = "gnss.csv"
    entries.update(_camera_entries(dataset.camera))
    if dataset.origin is not None:
        o = dataset.origin
        entries["origin"] = f"{_fmt(o.lat0)} {_fmt(o.lon0)} {_fmt(o.alt0)}"
    if dataset.init is not None:
        i = dataset.init
        entries["init.t"] = _fmt(i.t)
        entries["init.p"] = " ".join(_fmt(x) for x in i.p)
        entries["init.v"] = " ".join(_fmt(x) for x in i.v)
        entries["init.q"] = " ".join(_fmt(x) for x in i.q)
    if dataset.truth is not None:
        track = dataset.truth.trajectory() if hasattr(dataset.truth, "trajectory") else dataset.truth
        write_truth_csv(out / "truth.csv", track)
        entries["truth"] = "truth.csv"
    for k, v in sorted(dataset.meta.items()):
        entries[f"meta.{k}"] = str(v)
    path = out / "manifest.txt"
    write_manifest(path, entries)
    return path


def _vec(man, key, n, path):
    try:
        v = _floats(man[key])
    except ValueError:
        raise ParseError(f"{key}: expected numbers", path) from None
    if len(v) != n:
        raise ParseError(f"{key}: expected {n} numbers, got {len(v)}", path)
    return np.array(v)


def read_dataset(manifest_path):
    """Load a dataset from its manifest; relative paths resolve next to it."""
    path = Path(manifest_path)
    man = read_manifest(path)
    base = path.parent
    if "imu" not in man:
        raise ParseError("manifest lacks an 'imu' entry", path)
    imu = read_imu_csv(base / man["imu"])
    frames = []
    if "flow_dir" in man:
        fdir = base / man["flow_dir"]
        if not fdir.is_dir():
            raise ParseError(f"flow directory {fdir} does not exist", path)
        frames = [read_flow(p) for p in sorted(fdir.glob("*.ofl"))]
    gnss = read_gnss_csv(base / man["gnss"]) if "gnss" in man else []
    cam_keys = ["camera.fx", "camera.fy", "camera.cx", "camera.cy"]
    if not all(k in man for k in cam_keys):
        raise ParseError("manifest lacks camera intrinsics", path)
    try:
        cam = CameraModel(
            *(float(man[k]) for k in cam_keys),
            int(man.get("camera.width", 512)), int(man.get("camera.height", 683)),
            _vec(man, "camera.R_imu_cam", 9, path).reshape(3, 3) if "camera.R_imu_cam" in man else np.eye(3),
            _vec(man, "camera.t_imu_cam", 3, path) if "camera.t_imu_cam" in man else np.zeros(3))
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"camera: {exc}", path) from None
    origin = EnuOrigin(*_vec(man, "origin", 3, path)) if "origin" in man else None
    init = None
    if "init.p" in man:
        init = InitialPose(float(man.get("init.t", imu.t[0])), _vec(man, "init.p", 3, path),
                           _vec(man, "init.v", 3, path) if "init.v" in man else np.zeros(3),
                           _vec(man, "init.q", 4, path) if "init.q" in man else np.array([1.0, 0, 0, 0]))
    truth = read_truth_csv(base / man["truth"]) if "truth" in man else None
    meta = {k[5:]: v for k, v in man.items() if k.startswith("meta.")}
    ds = Dataset(imu, frames, gnss, cam, origin, init, truth, meta)
    align_streams(ds)
    return ds


# --------------------------------------------------------------------------
# filter history


def write_history(path, hist):
    if len(hist) == 0:
        raise ValueError("empty filter history")
    dim = len(hist.m_filt[0])
    F = np.stack([np.full((dim, dim), np.nan) if f is None else f for f in hist.F])
    with open(path, "wb") as fh:
        np.savez_compressed(fh, times=np.asarray(hist.times), tags=np.asarray(hist.tags),
                            F=F, m_pred=np.stack(hist.m_pred), P_pred=np.stack(hist.P_pred),
                            m_filt=np.stack(hist.m_filt), P_filt=np.stack(hist.P_filt))


def read_history(path):
    try:
        with np.load(path, allow_pickle=False) as d:
            arrays = {k: d[k] for k in ("times", "tags", "F", "m_pred", "P_pred",
                                        "m_filt", "P_filt")}
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"not a filter history: {exc}", path) from None
    hist = FilterHistory()
    for k in range(len(arrays["times"])):
        F = arrays["F"][k]
        hist.append(arrays["times"][k], str(arrays["tags"][k]), None if np.isnan(F).all() else F,
                    arrays["m_pred"][k], arrays["P_pred"][k], arrays["m_filt"][k],
                    arrays["P_filt"][k])
    return hist
