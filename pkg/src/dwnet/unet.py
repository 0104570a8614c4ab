"""UNet-class encoder-decoder operator with a hand-written backward pass.

Layout for a channel vector ``c = [c_1, ..., c_S]`` (3x3 convs, ReLU, zero
padding), listed in the canonical manifest order used for gradients and
checkpoints::

    enc{s}.conv1, enc{s}.conv2        s = 1..S   (then 2x2 average pooling)
    bottleneck.conv1, bottleneck.conv2          (2 c_S channels)
    dec{s}.conv1, dec{s}.conv2        s = S..1   (after x2 upsampling and
                                                  concatenation [up, skip])
    head                                        (1x1, linear)
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError, UsageError
from .field import (
    BoundaryMode,
    Kernel,
    concat_channels,
    concat_channels_adjoint,
    conv2d,
    conv2d_adjoint,
    downsample_avg2,
    downsample_avg2_adjoint,
    upsample_nn2,
    upsample_nn2_adjoint,
)

ZERO = BoundaryMode.ZERO


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple
    in_channels: int
    out_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ConfigurationError(f"channel vector must be non-empty and positive, got {self.channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("in/out channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {self.kernel_size}")

    @property
    def levels(self):
        return len(self.channels)

    def to_dict(self):
        return {"channels": list(self.channels), "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size}


def layer_specs(config):
    """Ordered (name, kh, kw, in, out) for every layer."""
    k = config.kernel_size
    specs = []
    prev = config.in_channels
    for s, c in enumerate(config.channels, start=1):
        specs.append((f"enc{s}.conv1", k, k, prev, c))
        specs.append((f"enc{s}.conv2", k, k, c, c))
        prev = c
    wide = 2 * config.channels[-1]
    specs.append(("bottleneck.conv1", k, k, prev, wide))
    specs.append(("bottleneck.conv2", k, k, wide, wide))
    below = wide
    for s in range(config.levels, 0, -1):
        c = config.channels[s - 1]
        specs.append((f"dec{s}.conv1", k, k, below + c, c))
        specs.append((f"dec{s}.conv2", k, k, c, c))
        below = c
    specs.append(("head", 1, 1, below, config.out_channels))
    return specs


def param_count(config):
    return sum(kh * kw * ci * co + co for _, kh, kw, ci, co in layer_specs(config))


@dataclass
class UNetParams:
    config: UNetConfig
    layers: dict = field(default_factory=dict)

    def named_tensors(self, prefix=""):
        out = {}
        for name, kern in self.layers.items():
            out[f"{prefix}{name}.weight"] = kern.weight
            out[f"{prefix}{name}.bias"] = kern.bias
        return out

    def copy(self):
        return UNetParams(self.config, {k: v.copy() for k, v in self.layers.items()})


def zeros_unet(config):
    return UNetParams(config, {name: Kernel.zeros(kh, kw, ci, co)
                               for name, kh, kw, ci, co in layer_specs(config)})


def build_unet(config, seed=0):
    """Fan-in scaled uniform weights, zero biases; `seed` may be a Generator."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, kh, kw, ci, co in layer_specs(config):
        bound = np.sqrt(6.0 / (kh * kw * ci))
        layers[name] = Kernel(rng.uniform(-bound, bound, size=(kh, kw, ci, co)), np.zeros(co))
    return UNetParams(config, layers)


@dataclass
class UNetTape:
    params: UNetParams
    input_shape: tuple
    inputs: dict   # layer name -> conv input
    pre: dict      # layer name -> pre-activation


def check_input(config, x):
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-1] != config.in_channels:
        raise ShapeError(f"UNet expects {config.in_channels} input channels, got shape {x.shape}")
    H, W = x.shape[-3:-1]
    for level in range(1, config.levels + 1):
        step = 2 ** level
        if H % step or W % step:
            raise ShapeError(
                f"input {H}x{W} cannot be pooled at level {level}: "
                f"spatial dims must be divisible by {2 ** config.levels}")


def unet_forward(params, x):
    """Evaluate the network; returns ``(output, tape)``."""
    config = params.config
    check_input(config, x)
    x = np.asarray(x, dtype=np.float64)
    inputs, pre = {}, {}

    def conv_relu(name, h):
        inputs[name] = h
        z = conv2d(h, params.layers[name], ZERO)
        pre[name] = z
        return np.maximum(z, 0.0)

    h = x
    skips = []
    for s in range(1, config.levels + 1):
        h = conv_relu(f"enc{s}.conv1", h)
        h = conv_relu(f"enc{s}.conv2", h)
        skips.append(h)
        h = downsample_avg2(h)
    h = conv_relu("bottleneck.conv1", h)
    h = conv_relu("bottleneck.conv2", h)
    for s in range(config.levels, 0, -1):
        h = concat_channels(upsample_nn2(h), skips[s - 1])
        h = conv_relu(f"dec{s}.conv1", h)
        h = conv_relu(f"dec{s}.conv2", h)
    inputs["head"] = h
    out = conv2d(h, params.layers["head"], ZERO)
    return out, UNetTape(params, x.shape, inputs, pre)


def unet_backward(params, tape, upstream, need_input_grad=True):
    """Gradients of ``<output, upstream>``.

    Returns ``(grads, grad_input)`` where `grads` maps layer names to Kernel
    gradients in manifest order; `grad_input` is None unless requested.
    """
    if tape.params is not params:
        raise UsageError("tape was recorded with a different parameter set")
    config = params.config
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = tape.input_shape[:-1] + (config.out_channels,)
    if upstream.shape != expected:
        raise UsageError(f"upstream shape {upstream.shape} does not match forward output {expected}")
    grads = {}

    def back(name, g, relu=True):
        if relu:
            g = g * (tape.pre[name] > 0.0)
        gk, gx = conv2d_adjoint(g, tape.inputs[name], params.layers[name], ZERO)
        grads[name] = gk
        return gx

    g = back("head", upstream, relu=False)
    skip_grads = {}
    for s in range(1, config.levels + 1):
        g = back(f"dec{s}.conv2", g)
        g = back(f"dec{s}.conv1", g)
        g_up, skip_grads[s] = concat_channels_adjoint(g, g.shape[-1] - config.channels[s - 1])
        g = upsample_nn2_adjoint(g_up)
    g = back("bottleneck.conv2", g)
    g = back("bottleneck.conv1", g)
    for s in range(config.levels, 0, -1):
        g = downsample_avg2_adjoint(g) + skip_grads[s]
        g = back(f"enc{s}.conv2", g)
        g = back(f"enc{s}.conv1", g)
    ordered = {name: grads[name] for name, *_ in layer_specs(config)}
    return ordered, (g if need_input_grad else None)
