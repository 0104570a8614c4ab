"""Losses, Adam, metrics and the training / evaluation loops."""
from dataclasses import dataclass, field
from enum import Enum
import logging
import time

import numpy as np

from .errors import ConfigurationError, DivergenceError, ShapeError
from .models import check_model_input, dn_backward, forward, threshold

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


class LossKind(str, Enum):
    BCE = "bce"
    L2 = "l2"


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: LossKind = LossKind.BCE
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    holdout_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigurationError("holdout_fraction must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    mean_loss: float
    accuracy_pct: float
    dice: float
    wall_seconds: float


def loss_and_grad(pred, mask, kind=LossKind.BCE):
    """Mean loss over all entries and its gradient w.r.t. `pred`."""
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != mask.shape:
        raise ShapeError(f"prediction {pred.shape} and mask {mask.shape} differ in shape")
    n = pred.size
    if LossKind(kind) == LossKind.L2:
        diff = pred - mask
        return float(np.mean(diff * diff)), 2.0 * diff / n
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (pred > PROB_CLAMP) & (pred < 1.0 - PROB_CLAMP)
    value = -np.mean(mask * np.log(p) + (1.0 - mask) * np.log(1.0 - p))
    grad = (-(mask / p) + (1.0 - mask) / (1.0 - p)) / n * inside
    return float(value), grad


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam, in place, in the key order of `params`."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return params, state


def _check_binary_pair(pred, mask):
    pred = np.asarray(pred)
    mask = np.asarray(mask)
    if pred.shape != mask.shape:
        raise ShapeError(f"prediction {pred.shape} and mask {mask.shape} differ in shape")
    return pred != 0, mask != 0


def accuracy(preds, masks, literal=False):
    """Mean per-image pixel agreement in percent.

    With ``literal=True`` only pixels where both are foreground count.
    """
    scores = []
    for pred, mask in zip(preds, masks, strict=True):
        p, g = _check_binary_pair(pred, mask)
        hits = (p & g) if literal else (p == g)
        scores.append(100.0 * hits.sum() / p.size)
    return float(np.mean(scores))


def dice(preds, masks):
    scores = []
    for pred, mask in zip(preds, masks, strict=True):
        p, g = _check_binary_pair(pred, mask)
        denom = p.sum() + g.sum()
        scores.append(1.0 if denom == 0 else 2.0 * (p & g).sum() / denom)
    return float(np.mean(scores))


def split_holdout(n, fraction):
    """Indices (train, held_out); held-out is the tail of the dataset."""
    n_hold = int(round(n * fraction))
    if n_hold >= n:
        n_hold = 0
    return np.arange(n - n_hold), np.arange(n - n_hold, n)


def _check_data(model, data):
    if len(data.images) == 0:
        raise ConfigurationError("dataset is empty")
    for name, img, mask in zip(data.names, data.images, data.masks):
        try:
            check_model_input(model, img)
        except ShapeError as exc:
            raise ShapeError(f"{name}: {exc}") from None
        if mask.shape != img.shape[:-1] + (1,):
            raise ShapeError(f"{name}: mask shape {mask.shape} does not match image {img.shape}")


def _stack(arrays, idx):
    return np.stack([arrays[i] for i in idx])


def _check_finite(value, params):
    if not np.isfinite(value) or not all(np.isfinite(t).all() for t in params.values()):
        raise DivergenceError("non-finite value in loss or parameters")


def predict(model, images, batch_size=16):
    """Soft predictions for a list of images, evaluated in fixed-size chunks."""
    out = []
    for start in range(0, len(images), batch_size):
        pred, _ = forward(model, np.stack(images[start:start + batch_size]))
        out.extend(pred)
    return out


def evaluate(model, data, loss_kind=LossKind.BCE, literal_accuracy=False, epoch=0):
    _check_data(model, data)
    t0 = time.perf_counter()
    preds = predict(model, data.images)
    losses = [loss_and_grad(p, g, loss_kind)[0] for p, g in zip(preds, data.masks)]
    bins = [threshold(p) for p in preds]
    return MetricsRecord(epoch, float(np.mean(losses)), accuracy(bins, data.masks, literal_accuracy),
                         dice(bins, data.masks), time.perf_counter() - t0)


def train(model, data, cfg, callback=None):
    """Minibatch Adam on ``mean loss(P(f_k), g_k)``.

    Metrics are evaluated every epoch on the held-out tail of `data` (the whole
    set when it is too small to split). Returns ``(model, records)``; the model
    is updated in place.
    """
    _check_data(model, data)
    train_idx, hold_idx = split_holdout(len(data.images), cfg.holdout_fraction)
    held = data.subset(hold_idx if len(hold_idx) else train_idx)
    rng = np.random.default_rng(cfg.seed)
    params = model.named_tensors()
    state = AdamState()
    records = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = train_idx[rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            f = _stack(data.images, idx)
            g = _stack(data.masks, idx)
            pred, tape = forward(model, f)
            value, upstream = loss_and_grad(pred, g, cfg.loss_kind)
            grads = dn_backward(tape, upstream, model)
            adam_step(params, grads, state, cfg)
            _check_finite(value, params)
            total += value * len(idx)
            count += len(idx)
        metrics = evaluate(model, held, cfg.loss_kind)
        rec = MetricsRecord(epoch, total / count, metrics.accuracy_pct, metrics.dice,
                            time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d loss %.5f acc %.2f%% dice %.4f (%.1fs)", epoch, rec.mean_loss,
                 rec.accuracy_pct, rec.dice, rec.wall_seconds)
        if callback is not None:
            callback(rec)
    return model, records
