"""Double-well potential, Ginzburg-Landau energy and the fixed-point activations.

The backward-Euler substep of the splitting scheme minimizes, pointwise,

    1/2 (v - u_half)^2 + (alpha / 2) v^2 (1 - v)^2

and is approximated by `gamma` iterations of

    v <- (u_half - alpha (2 v^3 - 3 v^2)) / (1 + alpha).
"""
from dataclasses import dataclass
from enum import Enum
import math

import numpy as np

from ._backend import kernels
from .errors import ConfigurationError, ShapeError


class Activation(str, Enum):
    Q_SIG = "sig"    # Q_gamma o Sig
    Q_PROJ = "proj"  # Q_gamma o Proj_[0,1]


@dataclass(frozen=True)
class DoubleWellParams:
    """Splitting constants.

    `tau`, `lambda_eps` (the product lambda*eps) and `alpha` (= 2 tau lambda / eps)
    are independent inputs; lambda and eps are only recovered when an energy
    has to be evaluated.
    """

    tau: float = 0.2
    lambda_eps: float = 1.0
    alpha: float = 15.0
    gamma: int = 3
    activation: Activation = Activation.Q_SIG

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if not self.lambda_eps >= 0:
            raise ConfigurationError(f"lambda_eps must be non-negative, got {self.lambda_eps}")
        if not self.alpha >= 0:
            raise ConfigurationError(f"alpha must be non-negative, got {self.alpha}")
        if int(self.gamma) != self.gamma or self.gamma < 0:
            raise ConfigurationError(f"gamma must be a non-negative integer, got {self.gamma}")
        object.__setattr__(self, "gamma", int(self.gamma))

    def lambda_and_eps(self):
        """Recover (lambda, eps) from lambda*eps and alpha = 2 tau lambda / eps."""
        if self.alpha <= 0 or self.lambda_eps <= 0:
            raise ConfigurationError("lambda and eps are only defined for alpha > 0 and lambda_eps > 0")
        ratio = self.alpha / (2.0 * self.tau)
        return math.sqrt(self.lambda_eps * ratio), math.sqrt(self.lambda_eps / ratio)

    def to_dict(self):
        return {"tau": self.tau, "lambda_eps": self.lambda_eps, "alpha": self.alpha,
                "gamma": self.gamma, "activation": self.activation.value}


@dataclass(frozen=True)
class EnergyReport:
    """Relaxed Potts energy split into its parts; the last two already carry lambda."""

    region_term: float
    gl_gradient_term: float
    double_well_term: float
    total: float


def double_well(v):
    v = np.asarray(v, dtype=np.float64)
    return v * v * (1.0 - v) ** 2


def _single_channel(u, name="u"):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 3:
        if u.shape[-1] != 1:
            raise ShapeError(f"{name} must be single-channel, got {u.shape[-1]} channels")
        u = u[..., 0]
    if u.ndim != 2:
        raise ShapeError(f"{name} must be a single 2-D field, got shape {u.shape}")
    return u


def _gl_parts(u, h):
    dx = np.roll(u, -1, axis=0) - u
    dy = np.roll(u, -1, axis=1) - u
    # |grad u|^2 h^2 with forward differences: the h factors cancel
    grad_sq = float(np.sum(dx * dx + dy * dy))
    well = float(np.sum(double_well(u))) * h * h
    return grad_sq, well


def gl_energy(u, eps, h=1.0):
    """Discrete Ginzburg-Landau functional with periodic forward differences."""
    u = _single_channel(u)
    if not eps > 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    grad_sq, well = _gl_parts(u, h)
    return 0.5 * eps * grad_sq + well / eps


def potts_relaxed_energy(u, force, lam, eps, h=1.0):
    u = _single_channel(u)
    force = _single_channel(force, "force")
    if u.shape != force.shape:
        raise ShapeError(f"u {u.shape} and force {force.shape} differ in shape")
    if not eps > 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    region = float(np.sum(force * u)) * h * h
    grad_sq, well = _gl_parts(u, h)
    gl_grad = lam * 0.5 * eps * grad_sq
    dw = lam * well / eps
    return EnergyReport(region, gl_grad, dw, region + gl_grad + dw)


def fixed_point_step(v, u_half, alpha):
    return (u_half - alpha * (2.0 * v ** 3 - 3.0 * v ** 2)) / (1.0 + alpha)


def q_gamma(u_half, alpha, gamma):
    """`gamma` fixed-point iterations started at ``v = u_half``."""
    if gamma < 0:
        raise ConfigurationError(f"gamma must be non-negative, got {gamma}")
    return kernels.q_gamma(u_half, alpha, gamma)


def q_converged(u_half, alpha, tol=1e-12, max_iter=100_000):
    """Iterate the fixed-point map until the largest update is below `tol`."""
    u_half = np.asarray(u_half, dtype=np.float64)
    v = u_half.copy()
    for _ in range(max_iter):
        nxt = fixed_point_step(v, u_half, alpha)
        done = np.max(np.abs(nxt - v), initial=0.0) < tol
        v = nxt
        if done:
            break
    return v


def proj01(a):
    return np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)


def relu(a):
    return np.maximum(a, 0.0)


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _squash(u_half, activation):
    if activation == Activation.Q_PROJ:
        s = proj01(u_half)
        ds = ((u_half > 0.0) & (u_half < 1.0)).astype(np.float64)
    else:
        s = sigmoid(u_half)
        ds = s * (1.0 - s)
    return s, ds


def activate(u_half, params):
    s, _ = _squash(np.asarray(u_half, dtype=np.float64), params.activation)
    return kernels.q_gamma(s, params.alpha, params.gamma)


def activate_with_grad(u_half, params):
    """Activation value and its pointwise derivative."""
    s, ds = _squash(np.asarray(u_half, dtype=np.float64), params.activation)
    v, dv = kernels.q_gamma_with_grad(s, params.alpha, params.gamma)
    return v, dv * ds


def activate_adjoint(upstream, u_half, params):
    _, d = activate_with_grad(u_half, params)
    return np.asarray(upstream, dtype=np.float64) * d
