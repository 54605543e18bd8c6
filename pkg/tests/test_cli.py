import json
import subprocess
import sys

import numpy as np
import pytest

from flowins.cli import main
from flowins.flow_fusion import FlowField
from flowins.flowio import read_flow, read_truth_csv, write_flow


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--duration", "8", "--seed", "4", "--out", str(out), "--quiet"]) == 0
    return out


def test_simulate_writes_manifest(sim_dir):
    assert (sim_dir / "manifest.txt").exists()
    assert (sim_dir / "imu.csv").exists() and (sim_dir / "truth.csv").exists()


def test_fuse_smooth_eval(sim_dir, tmp_path, capsys):
    manifest = str(sim_dir / "manifest.txt")
    assert main(["fuse", manifest, "--gnss", "--dense", "--out", str(tmp_path), "--quiet"]) == 0
    assert main(["smooth", str(tmp_path / "history.npz"), "--out", str(tmp_path),
                 "--quiet"]) == 0
    f = read_truth_csv(tmp_path / "filter_track.csv")
    s = read_truth_csv(tmp_path / "smoother_track.csv")
    assert len(f) == len(s) > 0
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "filter_track.csv"), str(tmp_path / "smoother_track.csv"),
                 "--truth", str(sim_dir / "truth.csv"), "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "track,rmse,rmse_unaligned" and len(lines) == 3
    assert all(float(line.split(",")[1]) < 5.0 for line in lines[1:])


def test_ablate(sim_dir, tmp_path, capsys):
    assert main(["ablate", str(sim_dir / "manifest.txt"), "--out", str(tmp_path)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 7
    assert len(list(tmp_path.glob("track_*.svg"))) == 6
    assert (tmp_path / "results.csv").read_text().splitlines() == table


def test_flowstats(rng, tmp_path):
    paths = []
    for k in range(4):
        du, dv = rng.normal(size=(2, 3, 4))
        fld = FlowField.from_dense(du, dv, np.ones((3, 4)), np.ones((3, 4)), 0.0, 0.1)
        paths.append(str(tmp_path / f"s{k}.ofl"))
        write_flow(paths[-1], fld)
    assert main(["flowstats", *paths, "--out", str(tmp_path), "--quiet"]) == 0
    out = read_flow(tmp_path / "flow_variance.ofl")
    assert out.dense and len(out) == 12


def test_flowstats_rejects_sparse(tmp_path):
    pts = np.array([[10.0, 10.0, 1.0, 1.0, 1.0, 1.0]])
    for k in range(2):
        write_flow(tmp_path / f"s{k}.ofl", FlowField(0.0, 0.1, 512, 683, pts))
    code = main(["flowstats", str(tmp_path / "s0.ofl"), str(tmp_path / "s1.ofl"),
                 "--out", str(tmp_path), "--quiet"])
    assert code == 2


def test_exit_codes(tmp_path, capsys):
    assert main(["teleport"]) == 1
    assert main(["fuse"]) == 1
    assert main(["fuse", str(tmp_path / "missing.txt"), "--quiet"]) == 2
    (tmp_path / "bad.json").write_text('{"warp": {}}')
    assert main(["simulate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "usage error" in err and "data error" in err


def test_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trajectory": {"duration": 2.0, "kind": "straight"},
                               "noise": {"gnss_std": 1.0}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 0
    truth = read_truth_csv(tmp_path / "truth.csv")
    assert truth.times[-1] == pytest.approx(2.0)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "flowins", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout
