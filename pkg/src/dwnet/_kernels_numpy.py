"""Pure-numpy hot kernels.

All convolution kernels operate on batched channels-last arrays whose spatial
axes are already padded: ``xp`` has shape (B, H + kh - 1, W + kw - 1, C_in).
Weights have shape (kh, kw, C_in, C_out).
"""
import numpy as np

NAME = "numpy"


def conv_forward(xp, w):
    kh, kw, _, co = w.shape
    B, Hp, Wp, _ = xp.shape
    H, W = Hp - kh + 1, Wp - kw + 1
    out = np.zeros((B, H, W, co), dtype=np.result_type(xp, w))
    for a in range(kh):
        for b in range(kw):
            out += xp[:, a:a + H, b:b + W, :] @ w[a, b]
    return out


def conv_backward_input(up, w):
    """Adjoint of `conv_forward` w.r.t. the padded input."""
    kh, kw, ci, _ = w.shape
    B, H, W, _ = up.shape
    gxp = np.zeros((B, H + kh - 1, W + kw - 1, ci), dtype=np.result_type(up, w))
    for a in range(kh):
        for b in range(kw):
            gxp[:, a:a + H, b:b + W, :] += up @ w[a, b].T
    return gxp


def conv_backward_weight(xp, up, kh, kw):
    B, H, W, co = up.shape
    ci = xp.shape[-1]
    up2 = up.reshape(-1, co)
    gw = np.empty((kh, kw, ci, co), dtype=np.result_type(xp, up))
    for a in range(kh):
        for b in range(kw):
            gw[a, b] = xp[:, a:a + H, b:b + W, :].reshape(-1, ci).T @ up2
    return gw


def q_gamma(a, alpha, gamma):
    a = np.asarray(a, dtype=np.float64)
    v = a.copy()
    scale = 1.0 / (1.0 + alpha)
    for _ in range(gamma):
        v = (a - alpha * (2.0 * v - 3.0) * v * v) * scale
    return v


def q_gamma_with_grad(a, alpha, gamma):
    """Q_gamma and its pointwise derivative d v_gamma / d a."""
    a = np.asarray(a, dtype=np.float64)
    v = a.copy()
    d = np.ones_like(a)
    scale = 1.0 / (1.0 + alpha)
    for _ in range(gamma):
        # d/dv (2v^3 - 3v^2) = 6v(v - 1)
        d = (1.0 - alpha * 6.0 * v * (v - 1.0) * d) * scale
        v = (a - alpha * (2.0 * v - 3.0) * v * v) * scale
    return v, d
