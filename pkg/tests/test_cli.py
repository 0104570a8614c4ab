import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dwnet import cli, dataio
from dwnet.errors import DivergenceError
from dwnet.models import model_from_config
from dwnet.training import dice

TINY = {"model": "dn1", "blocks": 1, "channels": [2], "epochs": 2, "batch_size": 4, "seed": 3}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    assert run("synth", "--out", d, "--n", 10, "--size", 16, "--seed", 7) == 0
    return d


def write_cfg(tmp_path, **overrides):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, **overrides}))
    return path


def test_synth_outputs(data_dir):
    files = sorted(os.listdir(data_dir))
    assert sum(f.endswith("_image.pgm") for f in files) == 10
    assert sum(f.endswith("_mask.pgm") for f in files) == 10
    assert "manifest.json" in files and len(files) == 21


def test_synth_rerun_identical(tmp_path, data_dir):
    other = tmp_path / "again"
    run("synth", "--out", other, "--n", 10, "--size", 16, "--seed", 7)
    for name in os.listdir(data_dir):
        assert (data_dir / name).read_bytes() == (other / name).read_bytes()


def test_synth_bad_size(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "x", "--n", 2, "--size", 60) == 2
    assert "multiple of 16" in capsys.readouterr().err


def test_bad_flag_is_exit_2(capsys):
    assert run("synth", "--n", "many") == 2


def test_train_writes_metrics_and_is_deterministic(tmp_path, data_dir, capsys):
    cfg = write_cfg(tmp_path)
    for name in ("a", "b"):
        assert run("train", "--config", cfg, "--data", data_dir, "--out", tmp_path / f"{name}.dwn",
                   "--metrics", tmp_path / f"{name}.csv") == 0
    assert "final held-out accuracy" in capsys.readouterr().out
    assert (tmp_path / "a.dwn").read_bytes() == (tmp_path / "b.dwn").read_bytes()
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert len(rows) == 1 + TINY["epochs"]


def test_train_zero_epochs_is_seeded_init(tmp_path, data_dir):
    cfg = write_cfg(tmp_path, epochs=0)
    assert run("train", "--config", cfg, "--data", data_dir, "--out", tmp_path / "z.dwn") == 0
    expected = cli.build_model(cli.resolve_run_config({**TINY, "epochs": 0}), 1)
    assert (tmp_path / "z.dwn").read_bytes() == dataio.encode_checkpoint(expected)


@pytest.mark.parametrize("overrides,flag", [({"learning_rat": 0.1}, None),
                                            ({"tau": -1.0}, None),
                                            ({"channels": []}, None),
                                            ({"gamma": 1.5}, None),
                                            ({"activation": "tanh"}, None),
                                            ({}, "dn2")])
def test_train_config_errors(tmp_path, data_dir, overrides, flag):
    cfg = write_cfg(tmp_path, **overrides)
    argv = ["train", "--config", cfg, "--data", data_dir, "--out", tmp_path / "x.dwn"]
    if flag:
        argv += ["--model", flag]
    assert run(*argv) == 2
    assert not (tmp_path / "x.dwn").exists()


def test_train_divergence_exit_3(tmp_path, data_dir, monkeypatch):
    def boom(*args, **kwargs):
        raise DivergenceError("non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--config", write_cfg(tmp_path), "--data", data_dir,
               "--out", tmp_path / "x.dwn") == 3


def test_eval_reproduces_final_training_row(tmp_path, data_dir):
    cfg = write_cfg(tmp_path)
    run("train", "--config", cfg, "--data", data_dir, "--out", tmp_path / "m.dwn",
        "--metrics", tmp_path / "train.csv")
    assert run("eval", "--ckpt", tmp_path / "m.dwn", "--data", data_dir,
               "--holdout-fraction", 0.2, "--metrics", tmp_path / "eval.csv") == 0
    last = dataio.read_metrics_csv(tmp_path / "train.csv")[-1]
    (ev,) = dataio.read_metrics_csv(tmp_path / "eval.csv")
    assert (ev.accuracy_pct, ev.dice) == (last.accuracy_pct, last.dice)


@pytest.fixture
def zero_ckpt(tmp_path):
    m = model_from_config({"model": "dn1", "in_channels": 1, "blocks": 2, "channels": [2, 2],
                           "scheme": {"activation": "sig"}})
    path = tmp_path / "zero.dwn"
    dataio.save_checkpoint(m, path)
    return path


def test_infer_zero_model_all_ones(tmp_path, zero_ckpt):
    img = tmp_path / "in.pgm"
    dataio.save_image(np.random.default_rng(0).random((8, 8, 1)), img)
    assert run("infer", "--ckpt", zero_ckpt, "--input", img, "--output", tmp_path / "m.pgm",
               "--soft", tmp_path / "p.pgm") == 0
    assert dataio.load_image(tmp_path / "m.pgm").min() == 1.0
    assert np.max(np.abs(dataio.load_image(tmp_path / "p.pgm") - 0.5)) <= 1 / 255


def test_infer_repeatable(tmp_path, data_dir):
    run("train", "--config", write_cfg(tmp_path, epochs=1), "--data", data_dir, "--out", tmp_path / "m.dwn")
    img = data_dir / "sample_00000_image.pgm"
    for name in ("a", "b"):
        assert run("infer", "--ckpt", tmp_path / "m.dwn", "--input", img,
                   "--output", tmp_path / f"{name}.pgm") == 0
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_infer_shape_error(tmp_path, zero_ckpt, capsys):
    img = tmp_path / "odd.pgm"
    dataio.save_image(np.zeros((6, 8)), img)
    assert run("infer", "--ckpt", zero_ckpt, "--input", img, "--output", tmp_path / "m.pgm") == 2
    assert "divisible by 4" in capsys.readouterr().err


def test_infer_bad_file_exit_2(tmp_path, zero_ckpt):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5 8 8 255\n" + bytes(3))
    assert run("infer", "--ckpt", zero_ckpt, "--input", bad, "--output", tmp_path / "m.pgm") == 2
    assert run("infer", "--ckpt", bad, "--input", bad, "--output", tmp_path / "m.pgm") == 2


def test_segment_classical_disk(tmp_path):
    f, g = dataio.disk_image(64)
    dataio.save_image(f, tmp_path / "disk.pgm")
    assert run("segment-classical", "--input", tmp_path / "disk.pgm", "--output", tmp_path / "m.pgm",
               "--steps", 40, "--energy-trace", tmp_path / "e.csv") == 0
    assert dice([dataio.load_image(tmp_path / "m.pgm")], [g]) >= 0.99
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 1 + 41


def test_segment_classical_constant_image(tmp_path, caplog):
    dataio.save_image(np.full((8, 8), 0.3), tmp_path / "c.pgm")
    assert run("segment-classical", "--input", tmp_path / "c.pgm", "--output", tmp_path / "m.pgm",
               "--steps", 3) == 0
    assert dataio.load_image(tmp_path / "m.pgm").min() == 1.0
    assert "constant image" in caplog.text


def test_segment_classical_degenerate_exit_3(tmp_path):
    dataio.save_image(np.full((8, 8), 0.3), tmp_path / "c.pgm")
    assert run("segment-classical", "--input", tmp_path / "c.pgm", "--output", tmp_path / "m.pgm",
               "--empty-region", "error") == 3


def test_gradcheck_passes_and_detects_breakage(capsys):
    assert run("gradcheck", "--model", "dn1", "--seed", 0) == 0
    assert "max relative error" in capsys.readouterr().out
    assert run("gradcheck", "--model", "dn1", "--seed", 0, "--break-adjoint") != 0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dwnet", "synth", "--out", str(tmp_path / "d"),
                          "--n", "1", "--size", "16"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "dwnet", "nonsense"], capture_output=True, text=True)
    assert res.returncode == 2
