"""Command-line interface.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import exceptions as exc
from .evaluation import emit_plots, procrustes_align, rmse, run_ablation
from .flow_fusion import GatingConfig
from .flowio import (FlowSampleStack, flow_variance_from_stack, read_dataset, read_flow,
                     read_history, read_truth_csv, write_dataset, write_flow, write_history,
                     write_truth_csv)
from .gnss import GnssConfig
from .pipeline import TABLE_CONFIGS, AblationConfig, FilterSettings, run_filter
from .simulator import NoiseSpec, TrajectorySpec, simulate_dataset
from .smoother import rts_smooth_states

log = logging.getLogger("flowins")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (exc.ParseError, exc.EmptyOverlap, exc.InconsistentStack, FileNotFoundError,
               IsADirectoryError, NotADirectoryError, PermissionError)
NUMERIC_ERRORS = (exc.CovarianceNotPSD, exc.SingularInnovation, exc.DegenerateAlignment,
                  exc.DegenerateGeometry, exc.ProjectionError, exc.NotStationary,
                  np.linalg.LinAlgError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# configuration


def _section(cfg, name, cls):
    """Keyword arguments for ``cls`` from config section ``name``, checked by field name."""
    raw = cfg.get(name, {})
    if not isinstance(raw, dict):
        raise UsageError(f"config section {name!r} must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown keys in {name!r}: {', '.join(sorted(unknown))}")
    return dict(raw)


def load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise exc.ParseError(f"invalid JSON: {e}", path) from None
    if not isinstance(cfg, dict):
        raise exc.ParseError("config must be a JSON object", path)
    allowed = {"trajectory", "noise", "gate", "gnss", "filter"}
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config sections: {', '.join(sorted(unknown))}")
    return cfg


def filter_settings(cfg):
    flt = dict(cfg.get("filter", {}))
    allowed = {"sigma_p0", "sigma_q0", "nugget", "sparse_points", "init", "standstill",
               "decimate"}
    unknown = set(flt) - allowed
    if unknown:
        raise UsageError(f"unknown keys in 'filter': {', '.join(sorted(unknown))}")
    return FilterSettings(gate=GatingConfig(**_section(cfg, "gate", GatingConfig)),
                          gnss=GnssConfig(**_section(cfg, "gnss", GnssConfig)), **flt)


def _ablation_config(args):
    return AblationConfig(use_gnss=args.gnss, use_dense_flow=args.dense,
                          use_sparse_flow=args.sparse, use_flow_uncertainty=not args.no_uncertainty)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg):
    traj = _section(cfg, "trajectory", TrajectorySpec)
    noise = _section(cfg, "noise", NoiseSpec)
    if args.duration is not None:
        traj["duration"] = args.duration
    if args.kind is not None:
        traj["kind"] = args.kind
    if args.outlier_fraction is not None:
        noise["outlier_fraction"] = args.outlier_fraction
    noise["seed"] = args.seed
    ds = simulate_dataset(TrajectorySpec(**traj), NoiseSpec(**noise))
    path = write_dataset(ds, _out_dir(args))
    log.info("wrote %s (%d IMU samples, %d frames, %d fixes)", path, len(ds.imu),
             len(ds.frames), len(ds.gnss))
    print(path)


def cmd_fuse(args, cfg):
    ds = read_dataset(args.manifest)
    config = _ablation_config(args)
    res = run_filter(ds, config, filter_settings(cfg))
    out = _out_dir(args)
    write_truth_csv(out / "filter_track.csv", res.track())
    write_history(out / "history.npz", res.history)
    n_acc = sum(r.accepted for r in res.field_reports)
    n_gnss = sum(r.accepted for r in res.gnss_reports)
    log.info("%s: %d history records, %d flow points and %d fixes accepted", config.label,
             len(res.history), n_acc, n_gnss)
    print(out / "filter_track.csv")


def cmd_smooth(args, cfg):
    hist = read_history(args.history)
    sm = rts_smooth_states(hist)
    out = _out_dir(args)
    write_truth_csv(out / "smoother_track.csv", sm.trajectory())
    if sm.jittered:
        log.warning("%d predicted covariances needed jitter", sm.jittered)
    print(out / "smoother_track.csv")


def cmd_eval(args, cfg):
    truth = read_truth_csv(args.truth)
    out = _out_dir(args)
    lines = ["track,rmse,rmse_unaligned"]
    for p in args.tracks:
        est = read_truth_csv(p)
        aligned, _, _ = procrustes_align(est, truth)
        lines.append(f"{Path(p).name},{rmse(aligned, truth):.6f},{rmse(est, truth):.6f}")
        log.info("%s: %s m aligned", p, lines[-1].split(",")[1])
    text = "\n".join(lines) + "\n"
    (out / "rmse.csv").write_text(text)
    if not args.quiet:
        sys.stdout.write(text)


def cmd_flowstats(args, cfg):
    stack = FlowSampleStack.from_fields([read_flow(p) for p in args.samples])
    fld = flow_variance_from_stack(stack, args.var_floor)
    out = _out_dir(args)
    write_flow(out / "flow_variance.ofl", fld)
    log.info("N_mc = %d, mean variance %.4g px^2", stack.n_mc, fld.points[:, 4:6].mean())
    print(out / "flow_variance.ofl")


def cmd_ablate(args, cfg):
    ds = read_dataset(args.manifest)
    results = run_ablation(ds, TABLE_CONFIGS, filter_settings(cfg))
    paths = emit_plots(results, _out_dir(args))
    if not args.quiet:
        sys.stdout.write(results.table())
    log.info("wrote %d files to %s", len(paths), args.out)


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="flowins", description="Optical-flow aided inertial navigation.")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with trajectory/noise/gate/gnss/filter sections")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out", default=".", help="output directory (default .)")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    s.add_argument("--duration", type=float)
    s.add_argument("--kind", choices=["circle", "figure_eight", "straight"])
    s.add_argument("--outlier-fraction", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fuse", parents=[common], help="filter a dataset")
    s.add_argument("manifest")
    s.add_argument("--gnss", action="store_true")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--dense", action="store_true")
    g.add_argument("--sparse", action="store_true")
    s.add_argument("--no-uncertainty", action="store_true",
                   help="replace per-point flow variances by field medians")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("smooth", parents=[common], help="RTS-smooth a stored filter history")
    s.add_argument("history")
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("eval", parents=[common], help="RMSE of tracks against a truth track")
    s.add_argument("tracks", nargs="+")
    s.add_argument("--truth", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("flowstats", parents=[common], help="mean and variance of MC flow samples")
    s.add_argument("samples", nargs="+", help="dense flow files, one per forward pass")
    s.add_argument("--var-floor", type=float, default=0.01)
    s.set_defaults(func=cmd_flowstats)

    s = sub.add_parser("ablate", parents=[common], help="run all six aiding combinations")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"flowins: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except UsageError as e:
        print(f"flowins: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"flowins: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as e:
        print(f"flowins: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TypeError, ValueError) as e:
        # bad values in the config or the data
        print(f"flowins: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
