"""Acceptance gate: one test per criterion, one PASS/FAIL line per criterion.

Run with ``pytest -v tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py`` (lines printed as they finish).
Criteria 4 and 5 train several desk-scale models and take most of an hour on
one CPU core.
"""
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from dwnet import cli, dataio
from dwnet.dataio import disk_image, synth_dataset
from dwnet.doublewell import double_well, q_converged, q_gamma
from dwnet.field import (
    BoundaryMode,
    Kernel,
    concat_channels,
    concat_channels_adjoint,
    conv2d,
    conv2d_adjoint,
    upsample_nn2,
    upsample_nn2_adjoint,
)
from dwnet.gradcheck import run_gradcheck
from dwnet.models import ClassicalConfig, classical_solve, dn1_param_count, dn2_param_count, threshold
from dwnet.training import dice, train
from dwnet.unet import UNetConfig, build_unet, unet_backward, unet_forward

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = []

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
_RUNS = {}


def report(number, passed, detail, seconds):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({seconds:.1f}s) {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


# ------------------------------------------------------------ 1

def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    alpha = 15.0
    u = rng.random(100_000)
    checks = {}
    checks["interval"] = all(
        (lambda v: v.min() >= 0 and v.max() <= 1)(q_gamma(u, alpha, g)) for g in (0, 1, 3, 7))
    checks["symmetry"] = max(np.max(np.abs(q_gamma(1 - u, alpha, g) - (1 - q_gamma(u, alpha, g))))
                             for g in (1, 3, 7)) <= 1e-12
    v1 = q_gamma(u, alpha, 1)
    low, high = (u > 0) & (u < 0.5), (u > 0.5) & (u < 1)
    checks["drift"] = bool(np.all(v1[low] < u[low]) and np.all(v1[high] > u[high]))
    sub = u[:5000]
    vstar = q_converged(sub, alpha)
    checks["proximal"] = bool(np.all(0.5 * (vstar - sub) ** 2 + alpha / 2 * double_well(vstar)
                                     <= alpha / 2 * double_well(sub) + 1e-12))
    residual = np.max(np.abs((1 + alpha) * vstar - sub + alpha * (2 * vstar ** 3 - 3 * vstar ** 2)))
    checks["el_residual"] = residual <= 1e-10
    secs = time.perf_counter() - t0
    ok = all(checks.values()) and secs < 5
    failed = [k for k, v in checks.items() if not v]
    return report(1, ok, f"EL residual {residual:.1e}; failed checks: {failed or 'none'}", secs)


# ------------------------------------------------------------ 2

def _adjoint_gaps(rng):
    gaps = []
    for mode in BoundaryMode:
        x, y = rng.standard_normal((16, 16, 3)), rng.standard_normal((16, 16, 2))
        k = Kernel(rng.standard_normal((3, 3, 3, 2)), np.zeros(2))
        _, gx = conv2d_adjoint(y, x, k, mode)
        gaps.append(abs(np.sum(conv2d(x, k, mode) * y) - np.sum(x * gx)))
    x, y = rng.standard_normal((8, 8, 3)), rng.standard_normal((16, 16, 3))
    gaps.append(abs(np.sum(upsample_nn2(x) * y) - np.sum(x * upsample_nn2_adjoint(y))))
    a, b = rng.standard_normal((16, 16, 2)), rng.standard_normal((16, 16, 3))
    y = rng.standard_normal((16, 16, 5))
    ga, gb = concat_channels_adjoint(y, 2)
    gaps.append(abs(np.sum(concat_channels(a, b) * y) - np.sum(a * ga) - np.sum(b * gb)))
    return max(gaps)


def _unet_fd_error(rng):
    p = build_unet(UNetConfig((2,), 1), 0)
    for t in p.named_tensors().values():
        t += 0.1 * rng.standard_normal(t.shape)
    x, y = rng.standard_normal((16, 16, 1)), rng.standard_normal((16, 16, 1))
    _, tape = unet_forward(p, x)
    grads, _ = unet_backward(p, tape, y)
    worst = scale = 0.0
    for name, t in p.named_tensors().items():
        layer, kind = name.rsplit(".", 1)
        g = getattr(grads[layer], kind)
        for idx in np.ndindex(t.shape):
            o = t[idx]
            t[idx] = o + 1e-6
            up = np.sum(unet_forward(p, x)[0] * y)
            t[idx] = o - 1e-6
            down = np.sum(unet_forward(p, x)[0] * y)
            t[idx] = o
            worst = max(worst, abs((up - down) / 2e-6 - g[idx]))
            scale = max(scale, abs(g[idx]))
    return worst / scale


def criterion_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    gap = _adjoint_gaps(rng)
    errs = {"unet": _unet_fd_error(rng)}
    for kind in ("dn1", "dn2"):
        errs[kind] = run_gradcheck(kind, seed=0, eps=1e-6).max_rel_error
    secs = time.perf_counter() - t0
    ok = gap <= 1e-10 and max(errs.values()) <= 1e-5 and secs < 60
    detail = f"adjoint gap {gap:.1e}; " + ", ".join(f"{k} rel err {v:.1e}" for k, v in errs.items())
    return report(2, ok, detail, secs)


# ------------------------------------------------------------ 3

def criterion_3():
    t0 = time.perf_counter()
    results = {}
    for noise in (0.1, 0.0):
        f, g = disk_image(128, noise_sd=noise, seed=0)
        u, trace = classical_solve(f, ClassicalConfig(steps=100))
        totals = np.array([e.total for e in trace])
        results[noise] = (dice([threshold(u)], [g]), float(np.max(np.diff(totals)[5:])))
    secs = time.perf_counter() - t0
    ok = (results[0.1][0] >= 0.98 and results[0.0][0] >= 0.99
          and max(r[1] for r in results.values()) <= 1e-6 and secs < 10)
    detail = (f"dice noisy {results[0.1][0]:.4f}, noiseless {results[0.0][0]:.4f}; "
              f"largest energy increase after step 5 {max(r[1] for r in results.values()):.1e}")
    return report(3, ok, detail, secs)


# ------------------------------------------------------------ 4 / 5

def desk_config(kind, **overrides):
    raw = json.loads((CONFIGS / f"{kind}_desk.json").read_text())
    return cli.resolve_run_config({**raw, **overrides})


def desk_run(kind, gamma=3, seed=0):
    """Train under the desk protocol; cached so criterion 5 reuses criterion 4."""
    key = (kind, gamma, seed)
    if key not in _RUNS:
        cfg = desk_config(kind, gamma=gamma, seed=seed)
        data = synth_dataset(0, 200, 64, noise_sd=0.1)
        model = cli.build_model(cfg, 1)
        t0 = time.perf_counter()
        _, records = train(model, data, cli.train_config_of(cfg))
        _RUNS[key] = (records[-1], time.perf_counter() - t0)
    return _RUNS[key]


def _check_protocol(cfg, blocks, channels):
    assert (cfg["blocks"], cfg["channels"]) == (blocks, channels)
    assert (cfg["tau"], cfg["gamma"], cfg["alpha"], cfg["lambda_eps"]) == (0.2, 3, 15.0, 1.0)
    assert (cfg["loss_kind"], cfg["learning_rate"], cfg["epochs"], cfg["seed"]) == ("bce", 1e-3, 50, 0)
    assert cfg["holdout_fraction"] == 0.2  # 40 of 200 held out


def criterion_4():
    _check_protocol(desk_config("dn1"), 4, [8, 16])
    _check_protocol(desk_config("dn2"), 2, [4, 8])
    t0 = time.perf_counter()
    r1, s1 = desk_run("dn1")
    r2, s2 = desk_run("dn2")
    ok = r1.dice >= 0.95 and r1.accuracy_pct >= 97 and r2.dice >= 0.93 and max(s1, s2) < 600
    detail = (f"DN-I dice {r1.dice:.4f} acc {r1.accuracy_pct:.2f}% ({s1:.0f}s); "
              f"DN-II dice {r2.dice:.4f} acc {r2.accuracy_pct:.2f}% ({s2:.0f}s)")
    return report(4, ok, detail, time.perf_counter() - t0)


def criterion_5():
    t0 = time.perf_counter()
    means = {}
    for gamma in (3, 0):
        means[gamma] = float(np.mean([desk_run("dn1", gamma, seed)[0].dice for seed in (0, 1, 2)]))
    ok = means[3] >= means[0]
    detail = f"mean held-out dice gamma=3 {means[3]:.4f}, gamma=0 {means[0]:.4f}"
    return report(5, ok, detail, time.perf_counter() - t0)


# ------------------------------------------------------------ 6

def criterion_6():
    t0 = time.perf_counter()
    n1 = dn1_param_count(3, [128, 128, 128, 128, 256], 10)
    n2 = dn2_param_count(3, [64, 64, 64, 128, 128], 3)
    d1, d2 = n1 / 9.86e6 - 1, n2 / 9.21e6 - 1
    secs = time.perf_counter() - t0
    ok = abs(d1) <= 0.15 and abs(d2) <= 0.15 and secs < 1
    return report(6, ok, f"DN-I {n1} ({d1:+.1%} vs 9.86e6), DN-II {n2} ({d2:+.1%} vs 9.21e6)", secs)


# ------------------------------------------------------------ 7

def criterion_7(workdir):
    t0 = time.perf_counter()
    workdir = Path(workdir)
    checks = {}
    cli.main(["synth", "--out", str(workdir / "data"), "--n", "12", "--size", "16", "--seed", "0"])
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"model": "dn1", "blocks": 2, "channels": [2, 4], "epochs": 2,
                               "batch_size": 4, "seed": 0}))
    codes = [cli.main(["train", "--config", str(cfg), "--data", str(workdir / "data"),
                       "--out", str(workdir / f"{n}.dwn")]) for n in ("a", "b")]
    checks["train_bytes"] = codes == [0, 0] and \
        (workdir / "a.dwn").read_bytes() == (workdir / "b.dwn").read_bytes()
    model = dataio.load_checkpoint(workdir / "a.dwn")
    dataio.save_checkpoint(model, workdir / "c.dwn")
    checks["ckpt_bytes"] = (workdir / "a.dwn").read_bytes() == (workdir / "c.dwn").read_bytes()
    field = np.random.default_rng(0).integers(0, 256, (16, 16, 3)) / 255.0
    dataio.save_image(field, workdir / "x.ppm")
    checks["ppm"] = np.array_equal(dataio.load_image(workdir / "x.ppm"), field)
    dataio.save_image(field[..., :1], workdir / "x.pgm")
    checks["pgm"] = np.array_equal(dataio.load_image(workdir / "x.pgm"), field[..., :1])
    secs = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    return report(7, not failed and secs < 60, f"failed checks: {failed or 'none'}", secs)


# ------------------------------------------------------------ pytest wrappers

def test_criterion_1_fixed_point_activation():
    assert criterion_1()


def test_criterion_2_adjoints_and_gradients():
    assert criterion_2()


def test_criterion_3_classical_solver():
    assert criterion_3()


@pytest.mark.slow
def test_criterion_4_desk_training():
    assert criterion_4()


@pytest.mark.slow
def test_criterion_5_gamma_trend():
    assert criterion_5()


def test_criterion_6_parameter_counts():
    assert criterion_6()


def test_criterion_7_determinism_round_trips(tmp_path):
    assert criterion_7(tmp_path)


if __name__ == "__main__":
    import tempfile

    results = [criterion_1(), criterion_2(), criterion_3()]
    if "--quick" not in sys.argv:
        results += [criterion_4(), criterion_5()]
    results.append(criterion_6())
    with tempfile.TemporaryDirectory() as tmp:
        results.append(criterion_7(os.path.join(tmp, "")))
    sys.exit(0 if all(results) else 1)
