import csv
import subprocess
import sys

import numpy as np
import pytest
import torch

from ptychoprior.cli import main
from ptychoprior.core import read_field
from ptychoprior.gan import DiscriminatorNet, GeneratorNet, save_checkpoint
from ptychoprior.sim import load_stack, read_meta


@pytest.fixture
def stack_dir(tmp_path):
    out = tmp_path / "stack"
    assert main(["simulate", "--n", "32", "--probe-diam", "16", "--step", "8", "--sigma", "0.5",
                 "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture
def toy_ckpt(tmp_path):
    path = tmp_path / "toy.ptyfz"
    save_checkpoint(path, GeneratorNet(32, seed=0), DiscriminatorNet(32, seed=1))
    return path


def test_simulate_layout(stack_dir):
    meta = read_meta(stack_dir / "meta.txt")
    assert {k: meta[k] for k in ("N", "M", "step_px", "count", "seed")} == {
        "N": "32", "M": "16", "step_px": "8", "count": "9", "seed": "7"}
    assert float(meta["overlap"]) == 0.5 and float(meta["sigma"]) == 0.5
    assert len(list(stack_dir.glob("frame_*.ptyf"))) == 9
    assert (stack_dir / "probe.ptyf").exists() and (stack_dir / "phantom.ptyf").exists()


def test_simulate_is_reproducible(tmp_path, stack_dir):
    main(["simulate", "--n", "32", "--probe-diam", "16", "--step", "8", "--sigma", "0.5",
          "--seed", "7", "--out", str(tmp_path / "again")])
    for f in stack_dir.iterdir():
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_epie_then_evaluate(tmp_path, stack_dir, capsys):
    recon = tmp_path / "recon.ptyf"
    assert main(["epie", "--data", str(stack_dir), "--iters", "5", "--seed", "3",
                 "--out", str(recon)]) == 0
    assert np.iscomplexobj(read_field(recon))
    score = tmp_path / "score.txt"
    assert main(["evaluate", "--recon", str(recon), "--truth", str(stack_dir / "phantom.ptyf"),
                 "--out", str(score)]) == 0
    text = score.read_text()
    assert text.startswith("# ssim window=11")
    value = float(text.split("ssim=")[-1])
    assert -1.0 <= value <= 1.0


def test_evaluate_identity(tmp_path, stack_dir, capsys):
    truth = str(stack_dir / "phantom.ptyf")
    assert main(["evaluate", "--recon", truth, "--truth", truth]) == 0
    assert "ssim=1.000000" in capsys.readouterr().out


def test_reconstruct_outputs(tmp_path, stack_dir, toy_ckpt):
    out = tmp_path / "rec"
    assert main(["reconstruct", "--data", str(stack_dir), "--gan", str(toy_ckpt),
                 "--loss", "poisson", "--lambda1", "1e-3", "--lambda2", "1e-4",
                 "--latent-steps", "3", "--total-steps", "6", "--stage-len", "2",
                 "--direction", "deep", "--seed", "5", "--out", str(out)]) == 0
    assert read_field(out / "phase.ptyf").shape == (32, 32)
    rows = list(csv.reader((out / "trace.csv").open()))
    assert rows[0] == ["step", "data", "tv", "dl", "total"] and len(rows) == 1 + 7
    config = (out / "config.txt").read_text()
    assert "direction=deep_first" in config and "lambda1=0.001" in config


def test_train_gan_writes_loadable_checkpoint(tmp_path):
    from ptychoprior.gan import load_checkpoint

    out = tmp_path / "g.ptyfz"
    assert main(["train-gan", "--dataset-size", "4", "--epochs", "1", "--batch-size", "2",
                 "--n", "16", "--seed", "2", "--out", str(out)]) == 0
    G, D = load_checkpoint(out)
    assert G.image_size == 16 and D.image_size == 16


def test_sweep_single_cell(tmp_path):
    spec = tmp_path / "sweep.txt"
    spec.write_text("overlaps=0.5\nsigmas=0\nmethods=epie\nseeds=0\nobject_size=32\n"
                    "probe_size=16\nprobe_diam=16\nepie_iters=3\n")
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "res"), "--no-timing"]) == 0
    lines = (tmp_path / "res" / "results.csv").read_text().splitlines()
    assert lines[0].startswith("# ssim")
    assert lines[1].split(",") == ["overlap", "sigma", "method", "lambda1", "lambda2", "seed",
                                   "ssim", "wall_seconds", "status"]
    assert len(lines) == 3 and lines[2].endswith(",ok")


def test_sweep_requires_gan_for_proposed(tmp_path, capsys):
    spec = tmp_path / "sweep.txt"
    spec.write_text("overlaps=0.5\nsigmas=0\nmethods=proposed\nseeds=0\n")
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "res")]) == 2


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["epie", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == 1
    assert "error:" in capsys.readouterr().err


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "ptychoprior.cli", "--help"],
                          capture_output=True, text=True, check=True)
    for cmd in ("simulate", "epie", "train-gan", "reconstruct", "evaluate", "sweep"):
        assert cmd in proc.stdout
