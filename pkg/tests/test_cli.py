"""Command-line pipeline: artifacts, exit codes, determinism contracts."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from trajflow.cli import main
from trajflow.model import lambda_at

BASE_CFG = """
[fm]
width = 32
depth = 2
seed = 1

[ntm]
positions = 2
channels = 1
blocks = 2
transporter_width = 16
predictor_width = 32
predictor_depth = 2
allowed_t = 4
seed = 1
"""

RUN_CFG = """
[include]
arch = base.cfg

[data]
name = two_moons

[train]
iters = 25
batch_size = 64
lr = 1e-3
warmup = 5
seed = 2

[distill]
iters = 8
batch_size = 64
lr = 1e-3
warmup = 2
seed = 3
"""


def read_csv(path: Path):
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One shared tiny pipeline run: pretrain, train, finetune, distill."""
    root = tmp_path_factory.mktemp("cli")
    (root / "base.cfg").write_text(BASE_CFG, encoding="utf-8")
    (root / "run.cfg").write_text(RUN_CFG, encoding="utf-8")
    cfg = str(root / "run.cfg")
    assert main(["pretrain-fm", cfg, "--out", str(root / "fm")]) == 0
    assert main(["train", cfg, "--out", str(root / "ntm")]) == 0
    assert main(["finetune", cfg, "--fm-checkpoint", str(root / "fm" / "fm.trjf"),
                 "--out", str(root / "ft")]) == 0
    assert main(["distill-denoiser", cfg,
                 "--checkpoint", str(root / "ntm" / "ntm.trjf"),
                 "--out", str(root / "den")]) == 0
    return root


def test_pretrain_metrics_and_manifest(workdir):
    header, rows = read_csv(workdir / "fm" / "metrics.csv")
    assert header == ["step", "loss", "lr", "wall_ms"]
    assert len(rows) == 25
    assert (workdir / "fm" / "fm.trjf").exists()
    manifest = (workdir / "fm" / "manifest.txt").read_text(encoding="utf-8")
    assert "seed = 2" in manifest
    assert "config_sha256 = " in manifest
    assert "checkpoint_sha256 = " in manifest
    assert "[config snapshot]" in manifest


def test_pretrain_rerun_reproduces_final_loss(workdir):
    cfg = str(workdir / "run.cfg")
    assert main(["pretrain-fm", cfg, "--out", str(workdir / "fm2")]) == 0
    _, rows1 = read_csv(workdir / "fm" / "metrics.csv")
    _, rows2 = read_csv(workdir / "fm2" / "metrics.csv")
    assert abs(float(rows1[-1][1]) - float(rows2[-1][1])) < 1e-12
    ckpt1 = (workdir / "fm" / "fm.trjf").read_bytes()
    ckpt2 = (workdir / "fm2" / "fm.trjf").read_bytes()
    assert ckpt1 == ckpt2


def test_train_metrics_header(workdir):
    header, rows = read_csv(workdir / "ntm" / "metrics.csv")
    assert header == ["step", "nll", "aux", "total", "lambda", "grad_norm",
                      "wall_ms"]
    assert len(rows) == 25


def test_finetune_metrics_drift_and_lambda_schedule(workdir):
    header, rows = read_csv(workdir / "ft" / "metrics.csv")
    assert header[-1] == "mu_drift"
    assert float(rows[0][2]) == 0.0  # aux starts at zero
    assert float(rows[0][-1]) == 0.0  # no drift at init
    for row in rows:
        step = int(row[0])
        assert float(row[4]) == lambda_at(step, 2.5, 25)


def test_sample_writes_all_artifacts(workdir):
    out = workdir / "s1"
    rc = main(["sample", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
               "--n", "40", "--steps", "4", "--seed", "5", "--trajectory",
               "--out", str(out)])
    assert rc == 0
    header, rows = read_csv(out / "samples.csv")
    assert header == ["x0", "x1"]
    assert len(rows) == 40
    t_header, t_rows = read_csv(out / "trajectory.csv")
    assert t_header == ["level", "time", "sample", "x0", "x1"]
    assert len(t_rows) == 5 * 40
    ppm = (out / "density.ppm").read_bytes()
    assert ppm.startswith(b"P6\n256 256\n255\n")
    assert len(ppm) == len(b"P6\n256 256\n255\n") + 256 * 256 * 3
    assert (out / "manifest.txt").exists()


def test_sample_same_seed_identical_bytes(workdir):
    args = ["sample", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
            "--n", "30", "--steps", "4", "--seed", "9", "--trajectory"]
    assert main(args + ["--out", str(workdir / "d1")]) == 0
    assert main(args + ["--out", str(workdir / "d2")]) == 0
    for name in ("samples.csv", "trajectory.csv", "density.ppm"):
        b1 = (workdir / "d1" / name).read_bytes()
        b2 = (workdir / "d2" / name).read_bytes()
        assert b1 == b2, name


def test_sample_n_zero_header_only(workdir):
    out = workdir / "s0"
    rc = main(["sample", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
               "--n", "0", "--steps", "4", "--out", str(out)])
    assert rc == 0
    assert (out / "samples.csv").read_text(encoding="utf-8") == "x0,x1\n"


def test_sample_step_count_outside_set_exits_4(workdir):
    rc = main(["sample", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
               "--n", "5", "--steps", "7", "--out", str(workdir / "bad1")])
    assert rc == 4


def test_sample_learned_denoise_paths(workdir):
    rc = main(["sample", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
               "--n", "5", "--steps", "4", "--denoise", "learned",
               "--out", str(workdir / "bad2")])
    assert rc == 5
    rc = main(["sample", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
               "--n", "5", "--steps", "4", "--denoise", "learned",
               "--denoiser-checkpoint", str(workdir / "nope.trjf"),
               "--out", str(workdir / "bad3")])
    assert rc == 5
    rc = main(["sample", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
               "--n", "5", "--steps", "4", "--denoise", "learned",
               "--denoiser-checkpoint", str(workdir / "den" / "denoiser.trjf"),
               "--out", str(workdir / "ok_learned")])
    assert rc == 0


def test_sample_from_fm_checkpoint(workdir):
    rc = main(["sample", "--checkpoint", str(workdir / "fm" / "fm.trjf"),
               "--n", "8", "--steps", "6", "--seed", "1",
               "--out", str(workdir / "fm_s")])
    assert rc == 0
    _, rows = read_csv(workdir / "fm_s" / "samples.csv")
    assert len(rows) == 8
    rc = main(["sample", "--checkpoint", str(workdir / "fm" / "fm.trjf"),
               "--n", "8", "--steps", "6", "--denoise", "score",
               "--out", str(workdir / "fm_bad")])
    assert rc == 4


def test_missing_artifacts_exit_3(workdir, tmp_path):
    missing = str(tmp_path / "absent.trjf")
    assert main(["sample", "--checkpoint", missing, "--n", "1", "--steps", "4",
                 "--out", str(tmp_path / "o1")]) == 3
    assert main(["finetune", str(workdir / "run.cfg"), "--fm-checkpoint",
                 missing, "--out", str(tmp_path / "o2")]) == 3
    assert main(["distill-denoiser", str(workdir / "run.cfg"),
                 "--checkpoint", missing, "--out", str(tmp_path / "o3")]) == 3
    assert main(["eval", "--checkpoint", missing, "--dataset", "two_moons",
                 "--steps", "4", "--out", str(tmp_path / "o4")]) == 3


def test_train_section_t_min_bounds(tmp_path):
    from trajflow.cli import _train_config_from
    from trajflow.runconfig import read_config

    cfg_path = tmp_path / "t.cfg"
    cfg_path.write_text("[train]\nt_min_lo = 0.02\nt_min_hi = 0.05\n",
                        encoding="utf-8")
    tcfg = _train_config_from(read_config(cfg_path))
    assert tcfg.t_min_range == (0.02, 0.05)
    cfg_path.write_text("[train]\nlr = 1e-3\n", encoding="utf-8")
    assert _train_config_from(read_config(cfg_path)).t_min_range is None


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[data]\nnoise = 0.05\n", encoding="utf-8")
    rc = main(["pretrain-fm", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "[data] name" in capsys.readouterr().err
    rc = main(["pretrain-fm", str(tmp_path / "absent.cfg"),
               "--out", str(tmp_path / "o")])
    assert rc == 2


def test_eval_csv_and_table(workdir, capsys):
    out = workdir / "ev"
    rc = main(["eval", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
               "--dataset", "two_moons", "--steps", "4", "--n", "300",
               "--out", str(out)])
    assert rc == 0
    header, rows = read_csv(out / "eval.csv")
    assert header == ["T", "energy_distance", "heldout_nll",
                      "wall_ms_per_sample"]
    assert len(rows) == 1 and rows[0][0] == "4"
    assert float(rows[0][1]) >= 0.0
    table = capsys.readouterr().out
    assert "energy_distance" in table
    rc = main(["eval", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
               "--dataset", "two_moons", "--steps", "4,9", "--n", "10",
               "--out", str(workdir / "ev_bad")])
    assert rc == 4
    rc = main(["eval", "--checkpoint", str(workdir / "fm" / "fm.trjf"),
               "--dataset", "two_moons", "--steps", "4", "--n", "10",
               "--out", str(workdir / "ev_fm")])
    assert rc == 4


def test_eval_deterministic_up_to_wall_clock(workdir):
    args = ["eval", "--checkpoint", str(workdir / "ntm" / "ntm.trjf"),
            "--dataset", "two_moons", "--steps", "4", "--n", "200"]
    assert main(args + ["--out", str(workdir / "ev1")]) == 0
    assert main(args + ["--out", str(workdir / "ev2")]) == 0
    _, rows1 = read_csv(workdir / "ev1" / "eval.csv")
    _, rows2 = read_csv(workdir / "ev2" / "eval.csv")
    assert [r[:3] for r in rows1] == [r[:3] for r in rows2]


def test_verify_suite_routing(capsys):
    rc = main(["verify", "--suite", "gradients"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "checks passed" in out


def test_label_conditioned_sampling(tmp_path):
    cfg = tmp_path / "cond.cfg"
    cfg.write_text("""
[data]
name = gauss_mixture_2d

[ntm]
positions = 2
channels = 1
blocks = 2
transporter_width = 16
predictor_width = 24
predictor_depth = 1
allowed_t = 4
conditioning = label
seed = 4

[train]
iters = 10
batch_size = 32
warmup = 2
seed = 4
""", encoding="utf-8")
    assert main(["train", str(cfg), "--out", str(tmp_path / "m")]) == 0
    ckpt = str(tmp_path / "m" / "ntm.trjf")
    rc = main(["sample", "--checkpoint", ckpt, "--n", "6", "--steps", "4",
               "--label", "2", "--cfg-w", "1.0", "--out", str(tmp_path / "s")])
    assert rc == 0
    header, rows = read_csv(tmp_path / "s" / "samples.csv")
    assert header == ["x0", "x1", "label"]
    assert all(r[-1] == "2" for r in rows)
    rc = main(["sample", "--checkpoint", ckpt, "--n", "6", "--steps", "4",
               "--label", "99", "--out", str(tmp_path / "s_bad")])
    assert rc == 4
