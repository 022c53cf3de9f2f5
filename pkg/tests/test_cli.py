import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from spherelift.attention import AttentionParams
from spherelift.cli import dispatch
from spherelift.formats import (load_mesh, load_signal, params_from_attention, save_checkpoint, save_mesh,
                                save_signal)
from spherelift.icosphere import build_hierarchy, from_arrays
from spherelift.lifting import SphericalSignal


def run(capsys, *argv):
    code = dispatch(["--quiet" if a == "-q" else a for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_error(err: str) -> dict:
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def mesh_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("mesh") / "ico2.mesh"
    assert dispatch(["mesh", "--max-level", "2", "--out", str(p), "--quiet"]) == 0
    return p


def test_mesh_then_check(capsys, mesh_file):
    code, out, _ = run(capsys, "check", "--mesh", str(mesh_file), "--no-gradients", "-q")
    assert code == 0
    assert "all" in out and "FAIL" not in out
    assert load_mesh(mesh_file).num_nodes(2) == 162


def test_mesh_manifest(mesh_file):
    m = json.loads(mesh_file.with_name(mesh_file.name + ".manifest.json").read_text())
    assert m["command"] == "mesh" and m["config"] == {"max_level": 2}
    assert len(m["config_hash"]) == 64 and m["seed"] == 0
    assert {"spherelift", "numpy", "scipy", "python"} <= set(m["versions"])


def test_check_reports_failure(capsys, tmp_path):
    h = build_hierarchy(1)
    coords = [c.copy() for c in h.coords]
    coords[1][20] *= 1.5
    h = from_arrays(coords, list(h.edges))
    p = tmp_path / "bad.mesh"
    save_mesh(p, h)
    code, out, _ = run(capsys, "check", "--mesh", str(p), "--no-gradients", "-q")
    assert code == 5
    assert "FAIL" in out and "first counterexample" in out


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and last_error(err)["error"] == "usage"


def test_missing_required_flag(capsys):
    code, _, err = run(capsys, "mesh", "--out", "x.mesh")
    assert code == 2


def test_transform_round_trip(capsys, tmp_path, mesh_file):
    rng = np.random.default_rng(0)
    sig = SphericalSignal(2, rng.normal(size=(162, 3)))
    src, coef, back = tmp_path / "x.sig", tmp_path / "c.sig", tmp_path / "y.sig"
    save_signal(src, sig)
    assert run(capsys, "transform", "--mesh", str(mesh_file), "--signal", str(src),
               "--direction", "forward", "--out", str(coef), "-q")[0] == 0
    assert run(capsys, "transform", "--mesh", str(mesh_file), "--signal", str(coef),
               "--direction", "backward", "--out", str(back), "-q")[0] == 0
    assert np.abs(load_signal(back).values - sig.values).max() <= 1e-10


def test_transform_checkpoint_ops(capsys, tmp_path):
    rng = np.random.default_rng(1)
    ap = AttentionParams.init({2: 2}, 3, rng=rng, scale=0.5)
    save_checkpoint(tmp_path / "ck", params_from_attention(ap))
    sig = SphericalSignal(2, rng.normal(size=(162, 2)))
    src, coef, back = tmp_path / "x.sig", tmp_path / "c.sig", tmp_path / "y.sig"
    save_signal(src, sig)
    ops = ["--ops", "checkpoint", str(tmp_path / "ck")]
    assert run(capsys, "transform", "--signal", str(src), *ops, "--direction", "forward",
               "--out", str(coef), "-q")[0] == 0
    code, _, err = run(capsys, "transform", "--signal", str(coef), *ops, "--direction", "backward",
                       "--out", str(back), "-q")
    assert code == 3 and "--features" in last_error(err)["message"]
    assert run(capsys, "transform", "--signal", str(coef), *ops, "--direction", "backward",
               "--features", str(src), "--out", str(back), "-q")[0] == 0
    assert np.abs(load_signal(back).values - sig.values).max() <= 1e-10


def test_malformed_config(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--config", "{not json", "--out", str(tmp_path), "-q")
    assert code == 3 and last_error(err)["error"] == "config"
    code, _, _ = run(capsys, "train", "--config", '{"network": {"pooling": "avg"}}', "--out", str(tmp_path), "-q")
    assert code == 3


def test_missing_data(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--ckpt", str(tmp_path / "nope"), "--data", str(tmp_path), "-q")
    assert code == 4 and last_error(err)["error"] == "data"
    code, _, _ = run(capsys, "transform", "--signal", str(tmp_path / "nope.sig"), "--direction", "forward",
                     "--out", str(tmp_path / "o.sig"), "-q")
    assert code == 4


def test_corrupt_signal(capsys, tmp_path):
    p = tmp_path / "x.sig"
    p.write_bytes(b"garbage!")
    code, _, _ = run(capsys, "transform", "--signal", str(p), "--direction", "forward",
                     "--out", str(tmp_path / "o.sig"), "-q")
    assert code == 4


def test_seed_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("SPHERELIFT_SEED", "42")
    out = tmp_path / "g"
    spec = '{"kind": "bandlimited", "level": 1, "channels": 1, "band_limit": 2}'
    assert run(capsys, "gen", "--spec", spec, "--count", "2", "--out", str(out), "-q")[0] == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 42 and m["config"]["spec"]["seed"] == 42
    monkeypatch.setenv("SPHERELIFT_SEED", "forty-two")
    assert run(capsys, "gen", "--spec", spec, "--out", str(out), "-q")[0] == 3


def test_train_eval_round_trip(capsys, tmp_path):
    spec = '{"kind": "bandlimited", "level": 2, "channels": 1, "band_limit": 3}'
    data = tmp_path / "data"
    assert run(capsys, "gen", "--spec", spec, "--count", "6", "--out", str(data), "-q")[0] == 0
    cfg = json.dumps({"network": {"max_level": 2, "min_level": 1, "channels": [3, 3]},
                      "train": {"epochs": 2, "batch_size": 3}})
    run_dir = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--task", "recon", "--config", cfg, "--data", str(data),
                     "--out", str(run_dir), "-q")
    assert code == 0
    for name in ("metrics.csv", "summary.json", "manifest.json", "checkpoint/manifest.json"):
        assert (run_dir / name).exists()
    assert len((run_dir / "metrics.csv").read_text().splitlines()) == 4
    code, out, _ = run(capsys, "eval", "--ckpt", str(run_dir / "checkpoint"), "--data", str(data), "-q")
    assert code == 0
    res = json.loads(out)
    assert res["metric_name"] == "mse" and np.isfinite(res["metric"])


def test_eval_shape_mismatch(capsys, tmp_path):
    spec = '{"kind": "bandlimited", "level": 2, "channels": 2, "band_limit": 3}'
    data = tmp_path / "data"
    run(capsys, "gen", "--spec", spec, "--count", "2", "--out", str(data), "-q")
    cfg = json.dumps({"network": {"max_level": 2, "min_level": 1, "channels": [2, 2]}, "train": {"epochs": 0}})
    run(capsys, "train", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "run"), "-q")
    shutil.rmtree(data)
    spec1 = spec.replace('"channels": 2', '"channels": 1')
    run(capsys, "gen", "--spec", spec1, "--count", "2", "--out", str(data), "-q")
    code, _, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "run" / "checkpoint"), "--data", str(data), "-q")
    assert code == 4


def test_compare_small(capsys, tmp_path):
    cfg = json.dumps({"network": {"max_level": 2, "min_level": 1, "channels": [2, 2]},
                      "train": {"epochs": 1, "batch_size": 4}, "data": {"n_train": 8, "n_test": 4}})
    out = tmp_path / "cmp.csv"
    code, stdout, _ = run(capsys, "compare", "--config", cfg, "--seeds", "0", "--out", str(out), "-q")
    assert code == 0
    assert len(out.read_text().splitlines()) == 4
    assert "median test MSE" in stdout
    assert run(capsys, "compare", "--kinds", "avg", "--out", str(out), "-q")[0] == 3


def test_console_script_logs_json(tmp_path):
    exe = shutil.which("spherelift")
    cmd = [exe] if exe else [sys.executable, "-m", "spherelift"]
    p = subprocess.run(cmd + ["mesh", "--max-level", "1", "--out", str(tmp_path / "m.mesh")],
                       capture_output=True, text=True)
    assert p.returncode == 0
    event = json.loads(p.stderr.strip().splitlines()[-1])
    assert event["event"] == "mesh" and event["nodes"] == [12, 42]
