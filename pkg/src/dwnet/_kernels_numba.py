"""numba-compiled hot kernels, same contract as `_kernels_numpy`.

Direct loops only beat the BLAS offset products when the channel product is
tiny (the 1->1 solver-path stencils, the D->1 input layer, 1->c first UNet
layers). Wider convolutions are routed to the numpy kernels.
"""
import numpy as np
from numba import njit

from . import _kernels_numpy

NAME = "numba"

# C_in * C_out at or below which the direct loop is used
DIRECT_LOOP_MAX = 8


@njit(cache=True)
def _conv_forward_loop(xp, w, out):
    kh, kw, ci, co = w.shape
    B, H, W, _ = out.shape
    for a in range(kh):
        for b in range(kw):
            for n in range(B):
                for i in range(H):
                    for j in range(W):
                        for c in range(ci):
                            xv = xp[n, i + a, j + b, c]
                            for o in range(co):
                                out[n, i, j, o] += xv * w[a, b, c, o]


@njit(cache=True)
def _conv_backward_input_loop(up, w, gxp):
    kh, kw, ci, co = w.shape
    B, H, W, _ = up.shape
    for a in range(kh):
        for b in range(kw):
            for n in range(B):
                for i in range(H):
                    for j in range(W):
                        for c in range(ci):
                            s = 0.0
                            for o in range(co):
                                s += up[n, i, j, o] * w[a, b, c, o]
                            gxp[n, i + a, j + b, c] += s


@njit(cache=True)
def _conv_backward_weight_loop(xp, up, gw):
    kh, kw, ci, co = gw.shape
    B, H, W, _ = up.shape
    for a in range(kh):
        for b in range(kw):
            for c in range(ci):
                for o in range(co):
                    s = 0.0
                    for n in range(B):
                        for i in range(H):
                            for j in range(W):
                                s += xp[n, i + a, j + b, c] * up[n, i, j, o]
                    gw[a, b, c, o] = s


@njit(cache=True)
def _q_gamma_loop(a, alpha, gamma, v):
    scale = 1.0 / (1.0 + alpha)
    for k in range(a.size):
        ak = a[k]
        vk = ak
        for _ in range(gamma):
            vk = (ak - alpha * (2.0 * vk - 3.0) * vk * vk) * scale
        v[k] = vk


@njit(cache=True)
def _q_gamma_grad_loop(a, alpha, gamma, v, d):
    scale = 1.0 / (1.0 + alpha)
    for k in range(a.size):
        ak = a[k]
        vk = ak
        dk = 1.0
        for _ in range(gamma):
            dk = (1.0 - alpha * 6.0 * vk * (vk - 1.0) * dk) * scale
            vk = (ak - alpha * (2.0 * vk - 3.0) * vk * vk) * scale
        v[k] = vk
        d[k] = dk


def _small(w):
    return w.shape[2] * w.shape[3] <= DIRECT_LOOP_MAX


def conv_forward(xp, w):
    if not _small(w):
        return _kernels_numpy.conv_forward(xp, w)
    kh, kw, _, co = w.shape
    B, Hp, Wp, _ = xp.shape
    out = np.zeros((B, Hp - kh + 1, Wp - kw + 1, co))
    _conv_forward_loop(np.ascontiguousarray(xp, dtype=np.float64),
                       np.ascontiguousarray(w, dtype=np.float64), out)
    return out


def conv_backward_input(up, w):
    if not _small(w):
        return _kernels_numpy.conv_backward_input(up, w)
    kh, kw, ci, _ = w.shape
    B, H, W, _ = up.shape
    gxp = np.zeros((B, H + kh - 1, W + kw - 1, ci))
    _conv_backward_input_loop(np.ascontiguousarray(up, dtype=np.float64),
                              np.ascontiguousarray(w, dtype=np.float64), gxp)
    return gxp


def conv_backward_weight(xp, up, kh, kw):
    ci, co = xp.shape[-1], up.shape[-1]
    if ci * co > DIRECT_LOOP_MAX:
        return _kernels_numpy.conv_backward_weight(xp, up, kh, kw)
    gw = np.empty((kh, kw, ci, co))
    _conv_backward_weight_loop(np.ascontiguousarray(xp, dtype=np.float64),
                               np.ascontiguousarray(up, dtype=np.float64), gw)
    return gw


def q_gamma(a, alpha, gamma):
    a = np.ascontiguousarray(a, dtype=np.float64)
    v = np.empty_like(a)
    _q_gamma_loop(a.reshape(-1), float(alpha), int(gamma), v.reshape(-1))
    return v


def q_gamma_with_grad(a, alpha, gamma):
    a = np.ascontiguousarray(a, dtype=np.float64)
    v = np.empty_like(a)
    d = np.empty_like(a)
    _q_gamma_grad_loop(a.reshape(-1), float(alpha), int(gamma), v.reshape(-1), d.reshape(-1))
    return v, d
