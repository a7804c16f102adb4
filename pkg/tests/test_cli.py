import datetime as dt
import json
import subprocess
import sys

import numpy as np
import pytest

from fewshot_gmm.cli import main
from fewshot_gmm.gmm import read_gmm_file

from conftest import write_csv


def run(*args):
    return main([str(a) for a in args])


def test_help_lists_flags(capsys):
    assert run("--help") == 0
    out = capsys.readouterr().out
    for cmd in ("prepare", "init-gmm", "synth", "train", "estimate", "sample", "evaluate", "bench"):
        assert cmd in out
    assert run("sample", "--help") == 0
    out = capsys.readouterr().out
    assert "--params" in out and "--seed" in out and "FEWSHOT_GMM_SEED" in out


def test_usage_errors_exit_2(tmp_path):
    assert run("prepare") == 2
    assert run("no-such-command") == 2
    assert run("sample", "--params", tmp_path / "missing.json") == 2


def test_prepare_one_row_gives_empty_manifest(tmp_path):
    csv_path = write_csv(tmp_path / "one.csv", [["h1", "2021-03-01"] + [0.5] * 24])
    assert run("prepare", "--input", csv_path, "--out", tmp_path / "ds") == 0
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert all(v["domains"] == 0 for v in manifest["counts"].values())
    assert manifest["parse"]["rows"] == 1
    assert (tmp_path / "ds" / "run.json").exists()


def test_prepare_bad_header_exit_3(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,date,a,b\nh1,2021-01-01,1,2\n")
    assert run("prepare", "--input", p, "--out", tmp_path / "ds") == 3


def test_prepare_real_format(tmp_path):
    rows = []
    rng = np.random.default_rng(0)
    for h in range(4):
        for i in range(260):
            d = dt.date(2020, 1, 1) + dt.timedelta(days=i)
            rows.append([f"h{h}", d.isoformat()] + list(np.round(rng.gamma(2, 0.3, 24), 4)))
    csv_path = write_csv(tmp_path / "d.csv", rows)
    assert run("prepare", "--input", csv_path, "--out", tmp_path / "ds", "--ratios", "0.5,0.25,0.25") == 0
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert sum(v["domains"] for v in manifest["counts"].values()) == 4
    assert manifest["scaler"]["scale"] > 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert run("synth", "--out", root / "ds", "--n-source", 24, "--n-target", 3,
               "--n-validation", 2, "--seed", 3) == 0
    assert run("init-gmm", "--data", root / "ds", "--out", root / "theta_o.json") == 0
    assert run("train", "--data", root / "ds", "--theta-o", root / "theta_o.json", "--out", root / "run",
               "--steps", 4, "--batch-size", 8, "--eval-every", 2, "--d-model", 16, "--layers", 1,
               "--heads", 2, "--d-ff", 32) == 0
    return root


def test_pipeline_artifacts(pipeline):
    for name in ("ds/manifest.json", "ds/truths.json", "ds/run.json", "theta_o.json", "run/last.ckpt",
                 "run/train_log.csv", "run/run.json"):
        assert (pipeline / name).exists(), name
    g, scaler = read_gmm_file(pipeline / "theta_o.json")
    assert g.J == 6 and g.T == 24 and scaler is not None
    log_lines = (pipeline / "run" / "train_log.csv").read_text().splitlines()
    assert log_lines[0] == "step,lr,train_loss,val_mmd" and len(log_lines) == 5


def test_estimate_and_sample(pipeline, tmp_path):
    rows = [["x", f"2021-06-0{i + 1}"] + [round(0.2 + 0.1 * i + 0.01 * t, 3) for t in range(24)]
            for i in range(4)]
    shots = write_csv(tmp_path / "shots.csv", rows)
    ckpt = pipeline / "run" / "last.ckpt"
    assert run("estimate", "--shots", shots, "--checkpoint", ckpt, "--out", tmp_path / "p.json") == 0
    g, scaler = read_gmm_file(tmp_path / "p.json")
    assert (g.J, g.T) == (6, 24)
    for name in ("a.csv", "b.csv"):
        assert run("sample", "--params", tmp_path / "p.json", "-m", 250, "--seed", 7,
                   "--out", tmp_path / name) == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    X = np.loadtxt(tmp_path / "a.csv", delimiter=",", skiprows=1)
    assert X.shape == (250, 24) and X.min() >= 0
    assert run("estimate", "--shots", shots, "--checkpoint", ckpt, "--out", tmp_path / "q.json") == 0
    assert (tmp_path / "p.json").read_bytes() == (tmp_path / "q.json").read_bytes()


def test_seed_from_environment(pipeline, tmp_path, monkeypatch):
    params = pipeline / "theta_o.json"
    monkeypatch.setenv("FEWSHOT_GMM_SEED", "11")
    assert run("sample", "--params", params, "-m", 5, "--out", tmp_path / "env.csv") == 0
    assert run("sample", "--params", params, "-m", 5, "--seed", 11, "--out", tmp_path / "flag.csv") == 0
    assert (tmp_path / "env.csv").read_bytes() == (tmp_path / "flag.csv").read_bytes()


def test_evaluate_and_bench(pipeline, tmp_path):
    ckpt = pipeline / "run" / "last.ckpt"
    assert run("evaluate", "--checkpoint", ckpt, "--data", pipeline / "ds", "--out", tmp_path / "r.csv") == 0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "domain_id,n_shots,method,mmd,kl,ks,wd,mse_mean,seed"
    assert len(lines) == 1 + 3 * 3
    assert run("bench", "--checkpoint", ckpt, "--data", pipeline / "ds", "--shots", "4,8",
               "--out", tmp_path / "b", "--deterministic", "-m", 100) == 0
    agg = (tmp_path / "b" / "bench_mmd_by_shots.csv").read_text().splitlines()
    assert agg[0] == "n_shots,method,mean_mmd,std_mmd" and len(agg) == 1 + 2 * 3
    long = (tmp_path / "b" / "bench_long.csv").read_text().splitlines()
    assert len(long) == 1 + 3 * 2 * 3 * 5
    assert (tmp_path / "b" / "run.json").exists()


def test_bad_checkpoint_exit_3(tmp_path, pipeline):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    shots = write_csv(tmp_path / "s.csv", [["x", "2021-01-01"] + [0.3] * 24])
    assert run("estimate", "--shots", shots, "--checkpoint", bad, "--out", tmp_path / "p.json") == 3
    assert run("init-gmm", "--data", tmp_path, "--out", tmp_path / "t.json") == 3


def test_console_script_module():
    out = subprocess.run([sys.executable, "-m", "fewshot_gmm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "Usage" in out.stdout
