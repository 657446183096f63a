import csv
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy.integrate import quad

from diffsampler.checkpoint import load_checkpoint
from diffsampler.cli import run


def _train_tiny(tmp_path, name="c.ckpt", extra=()):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("target = gmm\nbatch_size = 8\ngradient_steps = 3\nsteps_schedule = 5:1\n"
                   "width = 8\nphi2_width = 8\n")
    out = tmp_path / name
    assert run(["train", "--config", str(cfg), "--out", str(out), "--log", str(tmp_path / "log.csv"),
                "--quiet", *extra]) == 0
    return out


def test_reference_double_well(tmp_path):
    out = tmp_path / "ref.csv"
    assert run(["reference", "--target", "dw:d=2,w=1,delta=3", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["stat", "value", "provenance"]
    got = dict((r[0], float(r[1])) for r in rows[1:])
    z1 = quad(lambda x: math.exp(-(x * x - 3) ** 2), -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)[0]
    assert got["log_Z"] == pytest.approx(math.log(z1) + 0.5 * math.log(2 * math.pi), abs=1e-10)
    assert {"expected_sq_norm", "expected_l1_norm", "avg_std", "std_0", "std_1"} <= set(got)


def test_sample_is_deterministic(tmp_path):
    ckpt = _train_tiny(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["sample", "--ckpt", str(ckpt), "--n", "4", "--seed", "7", "--out", str(a)]) == 0
    assert run(["sample", "--ckpt", str(ckpt), "--n", "4", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 4


def test_train_seed_and_overrides(tmp_path):
    a = load_checkpoint(_train_tiny(tmp_path, "a.ckpt", ["--seed", "3", "--set", "lr=0.01"]))
    assert a.config.seed == 3 and a.config.lr == 0.01
    assert (tmp_path / "log.csv").read_text().startswith("step,loss,grad_norm,n_steps,seconds")


def test_eval_writes_report(tmp_path):
    ckpt = _train_tiny(tmp_path)
    out, samp = tmp_path / "r.csv", tmp_path / "s.csv"
    assert run(["eval", "--ckpt", str(ckpt), "--steps", "10,20", "--samples", "64", "--seed", "1",
                "--out", str(out), "--dump-samples", str(samp)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("target,n_steps,n_samples,seed,logz_bound")
    assert len(lines) == 3
    assert len(samp.read_text().splitlines()) == 64


def test_eval_target_mismatch_is_config_error(tmp_path, capsys):
    ckpt = _train_tiny(tmp_path)
    code = run(["eval", "--ckpt", str(ckpt), "--target", "funnel:d=2,nu=3", "--steps", "10", "--samples", "8",
                "--out", str(tmp_path / "r.csv")])
    assert code == 1
    assert "evaluation" in capsys.readouterr().err


def test_errors_and_exit_codes(tmp_path, capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["train", "--out", str(tmp_path / "x"), "--set", "nonsense=1"]) == 1
    err = capsys.readouterr().err
    assert "nonsense" in err and "config" in err
    assert run(["sample", "--ckpt", str(tmp_path / "missing.ckpt"), "--n", "2"]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_text("hello\n")
    assert run(["sample", "--ckpt", str(bad), "--n", "2"]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_module_entry_point_without_subcommand():
    proc = subprocess.run([sys.executable, "-m", "diffsampler"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage" in proc.stderr.lower()
