"""Region forces, double-well blocks, DN-I / DN-II and the classical solver.

One splitting step (a "block") is

    u_half = u + tau * lambda_eps * (W_lap * u) + tau * R(u)
    u_next = activate(u_half)

with ``R(u) = -F(f) + W^n * u + b^n`` for DN-I (shared region net F) and
``R(u) = G^n([u, f])`` for DN-II (one UNet per block). All solver-path
convolutions use periodic boundaries.
"""
from dataclasses import dataclass, field
from enum import Enum
import logging

import numpy as np

from ._backend import kernels
from .doublewell import (
    Activation,
    DoubleWellParams,
    activate,
    activate_with_grad,
    potts_relaxed_energy,
    proj01,
    q_gamma,
    sigmoid,
)
from .errors import ConfigurationError, DegeneratePartitionError, ShapeError, UsageError
from .field import (
    BoundaryMode,
    Kernel,
    concat_channels,
    conv2d,
    conv2d_adjoint,
    laplacian_stencil,
    luminance,
)
from .unet import (
    UNetConfig,
    UNetParams,
    build_unet,
    check_input,
    param_count,
    unet_backward,
    unet_forward,
    zeros_unet,
)

log = logging.getLogger(__name__)

PERIODIC = BoundaryMode.PERIODIC
LAPLACIAN = laplacian_stencil(1.0)
OUTPUT_GAIN = 10.0


# ---------------------------------------------------------------- Chan-Vese

class EmptyRegion(str, Enum):
    GLOBAL_MEAN = "global-mean"
    ERROR = "error"


@dataclass(frozen=True)
class ChanVeseParams:
    """`max_outer` caps how many times the region means are re-estimated
    (None: every step)."""

    alpha_cv: float = 0.1
    max_outer: int = None
    empty_region_fallback: EmptyRegion = EmptyRegion.GLOBAL_MEAN

    def __post_init__(self):
        object.__setattr__(self, "empty_region_fallback", EmptyRegion(self.empty_region_fallback))
        if not self.alpha_cv > 0:
            raise ConfigurationError(f"alpha_cv must be positive, got {self.alpha_cv}")
        if self.max_outer is not None and self.max_outer < 1:
            raise ConfigurationError(f"max_outer must be at least 1, got {self.max_outer}")


def region_means(f, u, cv):
    """Mean of the luminance over {u >= 0.5} and {u < 0.5}: returns (r0, r1)."""
    lum = luminance(f)[..., 0]
    inside = np.asarray(u)[..., 0] >= 0.5
    means = []
    for region in (~inside, inside):
        if region.any():
            means.append(float(lum[region].mean()))
        elif cv.empty_region_fallback == EmptyRegion.ERROR:
            label = "foreground" if region is inside else "background"
            raise DegeneratePartitionError(f"{label} region is empty")
        else:
            means.append(float(lum.mean()))
    return means[0], means[1]


def chan_vese_force(f, u, cv, means=None):
    """F = h_1 - h_0 with h_k = (f - r_k)^2 / alpha_cv.

    `means` = (r0, r1) skips the estimation from `u`.
    """
    f = np.asarray(f, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if f.ndim != 3 or u.ndim != 3 or u.shape[-1] != 1 or f.shape[:2] != u.shape[:2]:
        raise ShapeError(f"expected f (H, W, D) and u (H, W, 1), got {f.shape} and {u.shape}")
    r0, r1 = region_means(f, u, cv) if means is None else means
    lum = luminance(f)
    return ((lum - r1) ** 2 - (lum - r0) ** 2) / cv.alpha_cv


def threshold(pred):
    return (np.asarray(pred) >= 0.5).astype(np.float64)


# ---------------------------------------------------------------- blocks

def dbi_step(u, force, block, scheme):
    u = np.asarray(u, dtype=np.float64)
    if np.shape(force) != u.shape:
        raise ShapeError(f"u {u.shape} and force {np.shape(force)} differ in shape")
    u_half = (u - scheme.tau * force
              + scheme.tau * scheme.lambda_eps * conv2d(u, LAPLACIAN, PERIODIC)
              + scheme.tau * conv2d(u, block, PERIODIC))
    return activate(u_half, scheme)


def dbii_step(u, f, g_params, scheme):
    u = np.asarray(u, dtype=np.float64)
    g, _ = unet_forward(g_params, concat_channels(u, f))
    u_half = u + scheme.tau * scheme.lambda_eps * conv2d(u, LAPLACIAN, PERIODIC) + scheme.tau * g
    return activate(u_half, scheme)


def init_u0(f, input_layer, scheme):
    """Q_gamma(Sig(W^0 * f + b^0)), independent of the block activation."""
    return q_gamma(sigmoid(conv2d(f, input_layer, PERIODIC)), scheme.alpha, scheme.gamma)


# ---------------------------------------------------------------- models

@dataclass
class DNIParams:
    input_layer: Kernel
    region_net: UNetParams
    blocks: list
    output_layer: Kernel
    scheme: DoubleWellParams = field(default_factory=DoubleWellParams)

    kind = "dn1"

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ConfigurationError("a DN-I needs at least one block")

    @property
    def in_channels(self):
        return self.input_layer.in_channels

    @property
    def levels(self):
        return self.region_net.config.levels

    def named_tensors(self):
        out = {"input.weight": self.input_layer.weight, "input.bias": self.input_layer.bias}
        out.update(self.region_net.named_tensors("region."))
        for n, blk in enumerate(self.blocks):
            out[f"block{n}.weight"] = blk.weight
            out[f"block{n}.bias"] = blk.bias
        out["output.weight"] = self.output_layer.weight
        out["output.bias"] = self.output_layer.bias
        return out

    def config_dict(self):
        return {
            "model": "dn1",
            "in_channels": self.in_channels,
            "blocks": len(self.blocks),
            "channels": list(self.region_net.config.channels),
            "unet_kernel_size": self.region_net.config.kernel_size,
            "block_kernel_size": self.blocks[0].weight.shape[0],
            "io_kernel_size": self.input_layer.weight.shape[0],
            "scheme": self.scheme.to_dict(),
        }


@dataclass
class DNIIParams:
    input_layer: Kernel
    blocks: list
    output_layer: Kernel
    scheme: DoubleWellParams = field(default_factory=DoubleWellParams)

    kind = "dn2"

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ConfigurationError("a DN-II needs at least one block")

    @property
    def in_channels(self):
        return self.input_layer.in_channels

    @property
    def levels(self):
        return self.blocks[0].config.levels

    def named_tensors(self):
        out = {"input.weight": self.input_layer.weight, "input.bias": self.input_layer.bias}
        for n, g in enumerate(self.blocks):
            out.update(g.named_tensors(f"block{n}."))
        out["output.weight"] = self.output_layer.weight
        out["output.bias"] = self.output_layer.bias
        return out

    def config_dict(self):
        return {
            "model": "dn2",
            "in_channels": self.in_channels,
            "blocks": len(self.blocks),
            "channels": list(self.blocks[0].config.channels),
            "unet_kernel_size": self.blocks[0].config.kernel_size,
            "io_kernel_size": self.input_layer.weight.shape[0],
            "scheme": self.scheme.to_dict(),
        }


def _uniform_kernel(rng, k, ci, co):
    bound = np.sqrt(6.0 / (k * k * ci))
    return Kernel(rng.uniform(-bound, bound, size=(k, k, ci, co)), np.zeros(co))


def _output_layer(rng, k, gain):
    if gain is None:
        return _uniform_kernel(rng, k, 1, 1)
    # Sig(gain * (u - 1/2)) through the centre tap: starts as a soft threshold of u^M
    layer = Kernel.zeros(k, k, 1, 1)
    layer.weight[k // 2, k // 2, 0, 0] = gain
    layer.bias[:] = -0.5 * gain
    return layer


def _sig_shift(scheme):
    # Sig(u_half - 0.5) with the shift folded into the block bias: tau * b = -0.5
    return -0.5 / scheme.tau if scheme.activation == Activation.Q_SIG else 0.0


def build_dn1(in_channels, channels, blocks, scheme=None, seed=0,
              unet_kernel_size=3, block_kernel_size=3, io_kernel_size=3, output_gain=OUTPUT_GAIN):
    """Seeded DN-I: uniform fan-in input layer and region net, zero control kernels.

    The output layer starts as ``Sig(output_gain * (u - 1/2))``; pass
    ``output_gain=None`` for the uniform fan-in init instead.
    """
    scheme = scheme or DoubleWellParams()
    rng = np.random.default_rng(seed)
    input_layer = _uniform_kernel(rng, io_kernel_size, in_channels, 1)
    region = build_unet(UNetConfig(tuple(channels), in_channels, 1, unet_kernel_size), rng)
    ctrl = []
    for _ in range(blocks):
        k = Kernel.zeros(block_kernel_size, block_kernel_size, 1, 1)
        k.bias[:] = _sig_shift(scheme)
        ctrl.append(k)
    output_layer = _output_layer(rng, io_kernel_size, output_gain)
    return DNIParams(input_layer, region, ctrl, output_layer, scheme)


def build_dn2(in_channels, channels, blocks, scheme=None, seed=0,
              unet_kernel_size=3, io_kernel_size=3, output_gain=OUTPUT_GAIN):
    scheme = scheme or DoubleWellParams()
    rng = np.random.default_rng(seed)
    input_layer = _uniform_kernel(rng, io_kernel_size, in_channels, 1)
    config = UNetConfig(tuple(channels), in_channels + 1, 1, unet_kernel_size)
    nets = []
    for _ in range(blocks):
        g = build_unet(config, rng)
        g.layers["head"].bias[:] = _sig_shift(scheme)
        nets.append(g)
    output_layer = _output_layer(rng, io_kernel_size, output_gain)
    return DNIIParams(input_layer, nets, output_layer, scheme)


def model_from_config(cfg):
    """Zero-initialized model with the structure described by `config_dict()`."""
    scheme = DoubleWellParams(**cfg["scheme"])
    D = cfg["in_channels"]
    io = cfg.get("io_kernel_size", 3)
    uk = cfg.get("unet_kernel_size", 3)
    if cfg["model"] == "dn1":
        bk = cfg.get("block_kernel_size", 3)
        return DNIParams(Kernel.zeros(io, io, D, 1),
                         zeros_unet(UNetConfig(tuple(cfg["channels"]), D, 1, uk)),
                         [Kernel.zeros(bk, bk, 1, 1) for _ in range(cfg["blocks"])],
                         Kernel.zeros(io, io, 1, 1), scheme)
    if cfg["model"] == "dn2":
        ucfg = UNetConfig(tuple(cfg["channels"]), D + 1, 1, uk)
        return DNIIParams(Kernel.zeros(io, io, D, 1),
                          [zeros_unet(ucfg) for _ in range(cfg["blocks"])],
                          Kernel.zeros(io, io, 1, 1), scheme)
    raise ConfigurationError(f"unknown model kind {cfg['model']!r}")


def model_param_count(model):
    return sum(t.size for t in model.named_tensors().values())


def dn1_param_count(in_channels, channels, blocks, unet_kernel_size=3, block_kernel_size=3,
                    io_kernel_size=3):
    """Closed-form DN-I size: region net + input layer + M control kernels + output layer."""
    region = param_count(UNetConfig(tuple(channels), in_channels, 1, unet_kernel_size))
    return (region + io_kernel_size ** 2 * in_channels + 1
            + blocks * (block_kernel_size ** 2 + 1) + io_kernel_size ** 2 + 1)


def dn2_param_count(in_channels, channels, blocks, unet_kernel_size=3, io_kernel_size=3):
    g = param_count(UNetConfig(tuple(channels), in_channels + 1, 1, unet_kernel_size))
    return blocks * g + io_kernel_size ** 2 * in_channels + 1 + io_kernel_size ** 2 + 1


def check_model_input(model, f):
    f = np.asarray(f)
    if f.ndim < 3 or f.shape[-1] != model.in_channels:
        raise ShapeError(f"model expects {model.in_channels} image channels, got shape {f.shape}")
    H, W = f.shape[-3:-1]
    step = 2 ** model.levels
    if H % step or W % step:
        raise ShapeError(f"image {H}x{W}: spatial dims must be divisible by {step}")


# ---------------------------------------------------------------- forward / backward

@dataclass
class DNTape:
    params: object
    f: np.ndarray
    z0: np.ndarray
    s0: np.ndarray
    us: list          # u^0 .. u^M
    u_halves: list    # u^{1/2} .. u^{M-1/2}
    pred: np.ndarray
    force: np.ndarray = None
    unet_tapes: list = None


def _forward_common_start(f, params):
    check_model_input(params, f)
    f = np.asarray(f, dtype=np.float64)
    z0 = conv2d(f, params.input_layer, PERIODIC)
    s0 = sigmoid(z0)
    u0 = q_gamma(s0, params.scheme.alpha, params.scheme.gamma)
    return f, z0, s0, u0


def _diffuse(u, scheme):
    return u + scheme.tau * scheme.lambda_eps * conv2d(u, LAPLACIAN, PERIODIC)


def dn1_forward(f, params):
    """P_I(f) for an (H, W, D) image or a (B, H, W, D) batch; returns (pred, tape)."""
    f, z0, s0, u = _forward_common_start(f, params)
    sc = params.scheme
    force, utape = unet_forward(params.region_net, f)
    us, halves = [u], []
    for blk in params.blocks:
        u_half = _diffuse(u, sc) - sc.tau * force + sc.tau * conv2d(u, blk, PERIODIC)
        u = activate(u_half, sc)
        halves.append(u_half)
        us.append(u)
    pred = sigmoid(conv2d(u, params.output_layer, PERIODIC))
    return pred, DNTape(params, f, z0, s0, us, halves, pred, force, [utape])


def dn2_forward(f, params):
    f, z0, s0, u = _forward_common_start(f, params)
    sc = params.scheme
    us, halves, tapes = [u], [], []
    for g_params in params.blocks:
        g, gtape = unet_forward(g_params, concat_channels(u, f))
        u_half = _diffuse(u, sc) + sc.tau * g
        u = activate(u_half, sc)
        halves.append(u_half)
        us.append(u)
        tapes.append(gtape)
    pred = sigmoid(conv2d(u, params.output_layer, PERIODIC))
    return pred, DNTape(params, f, z0, s0, us, halves, pred, None, tapes)


def forward(model, f):
    return dn1_forward(f, model) if model.kind == "dn1" else dn2_forward(f, model)


def _kernel_grads(prefix, gk, out):
    out[f"{prefix}.weight"] = gk.weight
    out[f"{prefix}.bias"] = gk.bias


def dn_backward(tape, upstream, params, force_blocks=None):
    """Gradients of ``<pred, upstream>`` for every trainable tensor.

    The result is keyed like ``params.named_tensors()`` and in the same order.
    For DN-I, `force_blocks` (a set of block indices) restricts which blocks'
    dependence on the shared region force is differentiated; the default
    differentiates all of them, so the region-net gradient is the sum of the
    per-block contributions.
    """
    if tape.params is not params:
        raise UsageError("tape was recorded with a different parameter set")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.pred.shape:
        raise UsageError(f"upstream shape {upstream.shape} does not match prediction {tape.pred.shape}")
    sc = params.scheme
    grads = {}

    g_z = upstream * tape.pred * (1.0 - tape.pred)
    gk_out, g_u = conv2d_adjoint(g_z, tape.us[-1], params.output_layer, PERIODIC)

    block_grads = [None] * len(params.blocks)
    g_force = np.zeros_like(tape.us[0]) if params.kind == "dn1" else None
    for n in range(len(params.blocks) - 1, -1, -1):
        u_n = tape.us[n]
        _, d_act = activate_with_grad(tape.u_halves[n], sc)
        g_half = g_u * d_act
        _, g_lap = conv2d_adjoint(g_half, u_n, LAPLACIAN, PERIODIC, need_weight=False)
        g_u = g_half + sc.tau * sc.lambda_eps * g_lap
        if params.kind == "dn1":
            gk, g_ctrl = conv2d_adjoint(g_half, u_n, params.blocks[n], PERIODIC)
            block_grads[n] = Kernel(sc.tau * gk.weight, sc.tau * gk.bias)
            g_u = g_u + sc.tau * g_ctrl
            if force_blocks is None or n in force_blocks:
                g_force -= sc.tau * g_half
        else:
            gnet, g_in = unet_backward(params.blocks[n], tape.unet_tapes[n], sc.tau * g_half)
            block_grads[n] = gnet
            g_u = g_u + g_in[..., :1]

    g_s0 = g_u * _q_grad(tape.s0, sc)
    g_z0 = g_s0 * tape.s0 * (1.0 - tape.s0)
    gk_in, _ = conv2d_adjoint(g_z0, tape.f, params.input_layer, PERIODIC)

    _kernel_grads("input", gk_in, grads)
    if params.kind == "dn1":
        gnet, _ = unet_backward(params.region_net, tape.unet_tapes[0], g_force, need_input_grad=False)
        for name, gk in gnet.items():
            _kernel_grads(f"region.{name}", gk, grads)
        for n, gk in enumerate(block_grads):
            _kernel_grads(f"block{n}", gk, grads)
    else:
        for n, gnet in enumerate(block_grads):
            for name, gk in gnet.items():
                _kernel_grads(f"block{n}.{name}", gk, grads)
    _kernel_grads("output", gk_out, grads)
    return grads


def _q_grad(s, scheme):
    _, d = kernels.q_gamma_with_grad(s, scheme.alpha, scheme.gamma)
    return d


# ---------------------------------------------------------------- classical solver

@dataclass(frozen=True)
class ClassicalConfig:
    scheme: DoubleWellParams = field(
        default_factory=lambda: DoubleWellParams(activation=Activation.Q_PROJ))
    cv: ChanVeseParams = field(default_factory=ChanVeseParams)
    steps: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be at least 1, got {self.steps}")
        if self.scheme.activation != Activation.Q_PROJ:
            object.__setattr__(self, "scheme", DoubleWellParams(
                self.scheme.tau, self.scheme.lambda_eps, self.scheme.alpha, self.scheme.gamma,
                Activation.Q_PROJ))


def classical_initial(f):
    """proj01 of the luminance; a flat image starts from the barrier value 0.5."""
    lum = luminance(f)
    if np.ptp(lum) == 0.0:
        log.warning("constant image: no contrast to segment, starting from u = 0.5")
        return np.full_like(lum, 0.5)
    return proj01(lum)


def classical_solve(f, cfg, u0=None):
    """Double-well Chan-Vese splitting without learned control.

    Returns ``(u, trace)`` where `trace` holds the relaxed Potts energy of the
    initial state and of every step (``steps + 1`` entries), each evaluated with
    the Chan-Vese force re-estimated from that state.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"expected an (H, W, D) image, got shape {f.shape}")
    sc = cfg.scheme
    lam, eps = sc.lambda_and_eps()
    zero = Kernel.zeros(3, 3, 1, 1)
    u = classical_initial(f) if u0 is None else np.asarray(u0, dtype=np.float64)
    means = region_means(f, u, cfg.cv)
    estimates = 1
    force = chan_vese_force(f, u, cfg.cv, means)
    trace = [potts_relaxed_energy(u, force, lam, eps)]
    for _ in range(cfg.steps):
        u = dbi_step(u, force, zero, sc)
        if cfg.cv.max_outer is None or estimates < cfg.cv.max_outer:
            means = region_means(f, u, cfg.cv)
            estimates += 1
        force = chan_vese_force(f, u, cfg.cv, means)
        trace.append(potts_relaxed_energy(u, force, lam, eps))
    return u, trace
