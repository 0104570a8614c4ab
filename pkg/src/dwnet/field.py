"""Multi-channel 2-D fields, convolution and resampling with exact adjoints.

A field is a float64 array of shape ``(H, W, C)``; every operation here also
accepts a leading batch axis, ``(B, H, W, C)``, and treats items independently.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._backend import kernels
from .errors import ConfigurationError, ShapeError


class BoundaryMode(str, Enum):
    PERIODIC = "periodic"
    ZERO = "zero"


@dataclass
class Kernel:
    """Convolution weights of shape (kh, kw, in, out) plus one bias per output."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ShapeError(f"kernel weight must be 4-D, got shape {self.weight.shape}")
        kh, kw, _, co = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias.shape != (co,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {co} output channels")

    @classmethod
    def zeros(cls, kh, kw, in_channels, out_channels):
        return cls(np.zeros((kh, kw, in_channels, out_channels)), np.zeros(out_channels))

    @property
    def in_channels(self):
        return self.weight.shape[2]

    @property
    def out_channels(self):
        return self.weight.shape[3]

    @property
    def size(self):
        return self.weight.size + self.bias.size

    def copy(self):
        return Kernel(self.weight.copy(), self.bias.copy())


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise ShapeError(f"field must have shape (..., H, W, C), got {x.shape}")
    lead = x.shape[:-3]
    return x.reshape((-1,) + x.shape[-3:]), lead


def _pad(x, ph, pw, mode):
    widths = ((0, 0), (ph, ph), (pw, pw), (0, 0))
    if mode == BoundaryMode.PERIODIC:
        return np.pad(x, widths, mode="wrap")
    return np.pad(x, widths)


def _unpad_adjoint(gxp, H, W, ph, pw, mode):
    """Adjoint of `_pad`: fold padded-grid gradients back onto the field."""
    if mode != BoundaryMode.PERIODIC:
        return gxp[:, ph:ph + H, pw:pw + W, :].copy()
    rows = np.zeros((gxp.shape[0], H) + gxp.shape[2:])
    for k in range(gxp.shape[1]):
        rows[:, (k - ph) % H] += gxp[:, k]
    out = np.zeros((gxp.shape[0], H, W, gxp.shape[3]))
    for k in range(gxp.shape[2]):
        out[:, :, (k - pw) % W] += rows[:, :, k]
    return out


def conv2d(x, kernel, mode=BoundaryMode.PERIODIC):
    """Centered cross-correlation of `x` with `kernel`, plus bias."""
    xb, lead = _as_batch(x)
    if xb.shape[-1] != kernel.in_channels:
        raise ShapeError(
            f"kernel expects {kernel.in_channels} input channels, field has {xb.shape[-1]}")
    kh, kw = kernel.weight.shape[:2]
    out = kernels.conv_forward(_pad(xb, kh // 2, kw // 2, BoundaryMode(mode)), kernel.weight)
    out += kernel.bias
    return out.reshape(lead + out.shape[1:])


def conv2d_adjoint(upstream, x, kernel, mode=BoundaryMode.PERIODIC, need_weight=True):
    """Gradients of ``<conv2d(x, kernel), upstream>``.

    Returns ``(grad_kernel, grad_input)``; `grad_kernel` is None when
    `need_weight` is false.
    """
    ub, lead = _as_batch(upstream)
    xb, _ = _as_batch(x)
    mode = BoundaryMode(mode)
    kh, kw, ci, co = kernel.weight.shape
    if xb.shape[-1] != ci or ub.shape[-1] != co or ub.shape[:3] != xb.shape[:3]:
        raise ShapeError(
            f"adjoint shapes inconsistent: input {xb.shape}, upstream {ub.shape}, "
            f"kernel {kernel.weight.shape}")
    H, W = xb.shape[1:3]
    grad_kernel = None
    if need_weight:
        xp = _pad(xb, kh // 2, kw // 2, mode)
        grad_kernel = Kernel(kernels.conv_backward_weight(xp, ub, kh, kw),
                             ub.sum(axis=(0, 1, 2)))
    gxp = kernels.conv_backward_input(ub, kernel.weight)
    gx = _unpad_adjoint(gxp, H, W, kh // 2, kw // 2, mode)
    return grad_kernel, gx.reshape(lead + gx.shape[1:])


def laplacian_stencil(h=1.0):
    """Five-point Laplacian as a 3x3 single-channel kernel."""
    if not h > 0:
        raise ConfigurationError(f"grid spacing must be positive, got {h}")
    w = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]) / (h * h)
    return Kernel(w.reshape(3, 3, 1, 1), np.zeros(1))


def identity_kernel(size=3):
    w = np.zeros((size, size, 1, 1))
    w[size // 2, size // 2] = 1.0
    return Kernel(w, np.zeros(1))


def downsample_avg2(x):
    """Mean over non-overlapping 2x2 blocks."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise ShapeError(f"field must have shape (..., H, W, C), got {x.shape}")
    H, W, C = x.shape[-3:]
    if H % 2 or W % 2:
        raise ShapeError(f"downsampling needs even dimensions, got {H}x{W}")
    blocks = x.reshape(x.shape[:-3] + (H // 2, 2, W // 2, 2, C))
    return blocks.mean(axis=(-4, -2))


def downsample_avg2_adjoint(upstream):
    return upsample_nn2(upstream) * 0.25


def upsample_nn2(x):
    """Replicate every pixel into a 2x2 block."""
    x = np.asarray(x, dtype=np.float64)
    return np.repeat(np.repeat(x, 2, axis=-3), 2, axis=-2)


def upsample_nn2_adjoint(upstream):
    """2x2 block sums."""
    u = np.asarray(upstream, dtype=np.float64)
    H, W, C = u.shape[-3:]
    return u.reshape(u.shape[:-3] + (H // 2, 2, W // 2, 2, C)).sum(axis=(-4, -2))


def concat_channels(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"cannot concatenate fields of shapes {a.shape} and {b.shape}")
    if a.shape[-1] < 1 or b.shape[-1] < 1:
        raise ShapeError("fields must have at least one channel")
    return np.concatenate([a, b], axis=-1)


def concat_channels_adjoint(upstream, a_channels):
    u = np.asarray(upstream)
    return u[..., :a_channels], u[..., a_channels:]


def luminance(f):
    """Channel mean, kept as a single-channel field."""
    f = np.asarray(f, dtype=np.float64)
    return f.mean(axis=-1, keepdims=True)
