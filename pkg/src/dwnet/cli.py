"""Command-line entry point: ``dwnet <command> [flags]``.

Exit codes: 0 success, 2 configuration or data error, 3 numerical divergence
or degenerate partition.
"""
import argparse
import json
import logging
import sys

import numpy as np

from . import dataio
from .doublewell import Activation, DoubleWellParams
from .errors import ConfigurationError, DWNetError, FormatError
from .models import (
    ChanVeseParams,
    ClassicalConfig,
    EmptyRegion,
    build_dn1,
    build_dn2,
    check_model_input,
    classical_solve,
    forward,
    threshold,
)
from .training import LossKind, TrainConfig, evaluate, split_holdout, train

log = logging.getLogger("dwnet")

# Full-size defaults; presets in configs/ shrink the networks for desk runs.
MODEL_DEFAULTS = {
    "dn1": {"blocks": 10, "channels": [128, 128, 128, 128, 256], "tau": 0.2},
    "dn2": {"blocks": 3, "channels": [64, 64, 64, 128, 128], "tau": 0.5},
}
RUN_DEFAULTS = {
    "model": None,
    "blocks": None,
    "channels": None,
    "tau": None,
    "lambda_eps": 1.0,
    "alpha": 15.0,
    "gamma": 3,
    "activation": "sig",
    "unet_kernel_size": 3,
    "block_kernel_size": 3,
    "io_kernel_size": 3,
    "init_seed": None,
    "loss_kind": "bce",
    "learning_rate": 1e-3,
    "batch_size": 8,
    "epochs": 50,
    "seed": 0,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "holdout_fraction": 0.2,
}
_TRAIN_KEYS = ("loss_kind", "learning_rate", "batch_size", "epochs", "seed", "adam_beta1",
               "adam_beta2", "adam_eps", "holdout_fraction")


def _expect(cond, msg):
    if not cond:
        raise ConfigurationError(msg)


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_real(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def resolve_run_config(raw, model=None):
    """Validate a run-config mapping and fill in defaults.

    Unknown keys are rejected. `model` (from the command line) must agree with
    the file when both are given.
    """
    _expect(isinstance(raw, dict), "run config must be a JSON object")
    unknown = sorted(set(raw) - set(RUN_DEFAULTS))
    _expect(not unknown, f"unknown config keys: {', '.join(unknown)}")
    cfg = {**RUN_DEFAULTS, **{k: v for k, v in raw.items() if v is not None}}
    if model is not None:
        _expect(cfg["model"] in (None, model),
                f"--model {model} conflicts with config model {cfg['model']!r}")
        cfg["model"] = model
    _expect(cfg["model"] in MODEL_DEFAULTS, f"model must be 'dn1' or 'dn2', got {cfg['model']!r}")
    for key, value in MODEL_DEFAULTS[cfg["model"]].items():
        if cfg[key] is None:
            cfg[key] = value

    for key in ("blocks", "gamma", "unet_kernel_size", "block_kernel_size", "io_kernel_size",
                "batch_size", "epochs", "seed"):
        _expect(_is_int(cfg[key]), f"{key} must be an integer, got {cfg[key]!r}")
    for key in ("tau", "lambda_eps", "alpha", "learning_rate", "adam_beta1", "adam_beta2",
                "adam_eps", "holdout_fraction"):
        _expect(_is_real(cfg[key]), f"{key} must be a number, got {cfg[key]!r}")
    _expect(cfg["init_seed"] is None or _is_int(cfg["init_seed"]), "init_seed must be an integer")
    _expect(isinstance(cfg["channels"], list) and cfg["channels"]
            and all(_is_int(c) and c > 0 for c in cfg["channels"]),
            f"channels must be a non-empty list of positive integers, got {cfg['channels']!r}")
    _expect(cfg["blocks"] >= 1, "blocks must be at least 1")
    for key in ("unet_kernel_size", "block_kernel_size", "io_kernel_size"):
        _expect(cfg[key] >= 1 and cfg[key] % 2 == 1, f"{key} must be a positive odd integer")
    try:
        Activation(cfg["activation"])
        LossKind(cfg["loss_kind"])
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    # construct the typed configs now so every value is checked before any work
    scheme_of(cfg)
    train_config_of(cfg)
    return cfg


def scheme_of(cfg):
    return DoubleWellParams(cfg["tau"], cfg["lambda_eps"], cfg["alpha"], cfg["gamma"],
                            cfg["activation"])


def train_config_of(cfg):
    return TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})


def build_model(cfg, in_channels):
    seed = cfg["seed"] if cfg["init_seed"] is None else cfg["init_seed"]
    if cfg["model"] == "dn1":
        return build_dn1(in_channels, cfg["channels"], cfg["blocks"], scheme_of(cfg), seed,
                         cfg["unet_kernel_size"], cfg["block_kernel_size"], cfg["io_kernel_size"])
    return build_dn2(in_channels, cfg["channels"], cfg["blocks"], scheme_of(cfg), seed,
                     cfg["unet_kernel_size"], cfg["io_kernel_size"])


def load_run_config(path, model=None):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
    return resolve_run_config(raw, model)


# ---------------------------------------------------------------- commands

def _contrast(text):
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def cmd_synth(args):
    data = dataio.synth_dataset(args.seed, args.n, args.size, args.noise, args.contrast)
    meta = {"seed": args.seed, "n": args.n, "size": args.size, "noise_sd": args.noise,
            "contrast": list(args.contrast)}
    dataio.save_dataset_dir(data, args.out, meta)
    print(f"wrote {args.n} samples to {args.out}")


def cmd_train(args):
    cfg = load_run_config(args.config, args.model)
    data = dataio.load_dataset_dir(args.data)
    if not len(data):
        raise ConfigurationError(f"{args.data}: dataset is empty")
    model = build_model(cfg, data.images[0].shape[-1])
    model, records = train(model, data, train_config_of(cfg))
    dataio.save_checkpoint(model, args.out)
    if args.metrics:
        dataio.write_metrics_csv(records, args.metrics)
    if records:
        last = records[-1]
        print(f"final held-out accuracy {last.accuracy_pct:.2f}% dice {last.dice:.4f}")
    else:
        print("no epochs run; wrote the initial model")


def cmd_infer(args):
    model = dataio.load_checkpoint(args.ckpt)
    img = dataio.load_image(args.input)
    check_model_input(model, img)
    pred, _ = forward(model, img)
    dataio.save_image(threshold(pred), args.output)
    if args.soft:
        dataio.save_image(pred, args.soft)


def cmd_segment_classical(args):
    scheme = DoubleWellParams(args.tau, args.lambda_eps, args.alpha, args.gamma, Activation.Q_PROJ)
    cv = ChanVeseParams(args.alpha_cv, args.max_outer, args.empty_region)
    f = dataio.load_image(args.input)
    u, trace = classical_solve(f, ClassicalConfig(scheme, cv, args.steps))
    dataio.save_image(threshold(u), args.output)
    if args.energy_trace:
        dataio.write_energy_csv(trace, args.energy_trace)


def cmd_eval(args):
    model = dataio.load_checkpoint(args.ckpt)
    data = dataio.load_dataset_dir(args.data)
    if args.holdout_fraction:
        _, idx = split_holdout(len(data), args.holdout_fraction)
        data = data.subset(idx if len(idx) else np.arange(len(data)))
    rec = evaluate(model, data, args.loss, args.literal_accuracy)
    if args.metrics:
        dataio.write_metrics_csv([rec], args.metrics)
    print(f"accuracy {rec.accuracy_pct:.2f}% dice {rec.dice:.4f} loss {rec.mean_loss:.6g}")


def cmd_gradcheck(args):
    from .gradcheck import broken_adjoint, run_gradcheck

    if args.break_adjoint:
        with broken_adjoint():
            res = run_gradcheck(args.model, args.seed, args.eps, args.activation)
    else:
        res = run_gradcheck(args.model, args.seed, args.eps, args.activation)
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_entries} parameters")
    return 0 if res.passed(args.tol) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="dwnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic image/mask dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--contrast", type=_contrast, default=(0.25, 0.75))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a DN-I or DN-II model")
    s.add_argument("--model", choices=("dn1", "dn2"))
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="segment one image with a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--soft", help="also write the probability map")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("segment-classical", help="double-well Chan-Vese without learning")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--tau", type=float, default=0.2)
    s.add_argument("--lambda-eps", type=float, default=1.0)
    s.add_argument("--gamma", type=int, default=3)
    s.add_argument("--alpha", type=float, default=15.0)
    s.add_argument("--alpha-cv", type=float, default=0.1)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--max-outer", type=int)
    s.add_argument("--empty-region", choices=[e.value for e in EmptyRegion],
                   default=EmptyRegion.GLOBAL_MEAN.value)
    s.add_argument("--energy-trace")
    s.set_defaults(func=cmd_segment_classical)

    s = sub.add_parser("eval", help="accuracy and dice of a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metrics")
    s.add_argument("--holdout-fraction", type=float, default=0.0,
                   help="evaluate only the held-out tail used during training")
    s.add_argument("--loss", choices=[k.value for k in LossKind], default="bce")
    s.add_argument("--literal-accuracy", action="store_true",
                   help="count only pixels that are foreground in both")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    s.add_argument("--model", choices=("dn1", "dn2"), default="dn1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-6, help="finite-difference step")
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--activation", choices=[a.value for a in Activation], default="sig")
    s.add_argument("--break-adjoint", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except DWNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
