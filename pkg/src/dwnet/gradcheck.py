"""End-to-end finite-difference check of the hand-written backward pass."""
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import models
from .doublewell import DoubleWellParams
from .errors import ConfigurationError


@dataclass
class GradcheckResult:
    """`max_rel_error` is norm-wise over the whole gradient vector; `per_tensor`
    holds the same measure per tensor for diagnostics (tensors with tiny
    gradients there mostly show finite-difference roundoff)."""

    max_rel_error: float
    per_tensor: dict
    n_entries: int

    def passed(self, tol=1e-5):
        return self.max_rel_error <= tol


def rel_error(a, b):
    """max|a - b| / max(max|a|, max|b|), 0 when both vanish."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return 0.0 if scale == 0.0 else float(np.abs(a - b).max() / scale)


@contextmanager
def broken_adjoint():
    """Drop the diffusion term from the backward pass (sensitivity hook for tests)."""
    saved = models.LAPLACIAN
    models.LAPLACIAN = type(saved)(np.zeros_like(saved.weight), saved.bias.copy())
    original_forward = models._diffuse

    def diffuse(u, scheme):
        return u + scheme.tau * scheme.lambda_eps * models.conv2d(u, saved, models.PERIODIC)

    models._diffuse = diffuse
    try:
        yield
    finally:
        models.LAPLACIAN = saved
        models._diffuse = original_forward


def tiny_model(kind, seed, activation="sig", size=16):
    """c=[2], M=2, one input channel; biases jittered off the ReLU kinks."""
    rng = np.random.default_rng(seed)
    scheme = DoubleWellParams(activation=activation)
    if kind == "dn1":
        model = models.build_dn1(1, [2], 2, scheme, seed=seed)
    elif kind == "dn2":
        model = models.build_dn2(1, [2], 2, scheme, seed=seed)
    else:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    for t in model.named_tensors().values():
        t += 0.1 * rng.standard_normal(t.shape)
    f = rng.random((size, size, 1))
    probe = rng.standard_normal((size, size, 1))
    return model, f, probe


def check_model(model, f, probe, eps=1e-6):
    """Compare dn_backward against central differences of ``sum(pred * probe)``."""
    if not eps > 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    _, tape = models.forward(model, f)
    analytic = models.dn_backward(tape, probe, model)

    def objective():
        return float(np.sum(models.forward(model, f)[0] * probe))

    per_tensor, count = {}, 0
    worst_diff = scale = 0.0
    for name, t in model.named_tensors().items():
        fd = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + eps
            up = objective()
            t[idx] = orig - eps
            down = objective()
            t[idx] = orig
            fd[idx] = (up - down) / (2.0 * eps)
        per_tensor[name] = rel_error(analytic[name], fd)
        worst_diff = max(worst_diff, np.abs(analytic[name] - fd).max())
        scale = max(scale, np.abs(analytic[name]).max(), np.abs(fd).max())
        count += t.size
    return GradcheckResult(0.0 if scale == 0.0 else float(worst_diff / scale), per_tensor, count)


def run_gradcheck(kind="dn1", seed=0, eps=1e-6, activation="sig"):
    model, f, probe = tiny_model(kind, seed, activation)
    return check_model(model, f, probe, eps)
