"""Trainable Nadaraya-Watson (normalised convolution) layer.

For each output channel ``t`` and pixel ``(u, v)``::

    num  = sum_{c,i,j} S[c, u+i, v+j] * w[t, c, i, j]
    den  = sum_{c,i,j} M[c, u+i, v+j] * |w[t, c, i, j]|
    R    = num / (den + eps) + b[t]
    M_up = den

Several input channels are normalised jointly (numerator and denominator
both summed over ``c``). Batches are channel-major ``(C, N, H, W)``; zero
padding at the borders marks padded pixels as non-informative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from nwsr.ops import correlate, correlate_grad_w, correlate_grad_x

EPS = 1e-8


class KernelNormError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class FeatureStack(NamedTuple):
    R: np.ndarray
    M: np.ndarray | None


@dataclass
class NWKernel:
    W: np.ndarray  # (t, c_in, 2k+1, 2k+1), signed
    b: np.ndarray  # (t,)

    @property
    def t(self):
        return self.W.shape[0]

    @property
    def c_in(self):
        return self.W.shape[1]

    @property
    def k(self):
        return self.W.shape[2] // 2


def normalize_kernel(W):
    """Scale each output channel of `W` to unit L1 norm, keeping signs."""
    W = np.asarray(W, dtype=np.float64)
    norms = np.abs(W).reshape(W.shape[0], -1).sum(axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise KernelNormError("cannot normalise an all-zero kernel channel")
    return W / norms.reshape((-1,) + (1,) * (W.ndim - 1))


def project_kernel_grad(W, grad_W):
    """Pull a gradient back through ``V -> V / ||V||_1`` evaluated at ``V = W``.

    Assumes `W` is already L1-normalised per output channel; the result is
    ``g - sign(W) * <W, g>`` channel-wise, which leaves the norm unchanged
    to first order.
    """
    t = W.shape[0]
    inner = (W * grad_W).reshape(t, -1).sum(axis=1)
    return grad_W - np.sign(W) * inner.reshape((-1,) + (1,) * (W.ndim - 1))


def init_nw_kernel(t, c_in, k, rng, mean=0.2, std=0.05):
    """Normal(mean, std) weights truncated to two std, then L1-normalised."""
    K = 2 * k + 1
    n = t * c_in * K * K
    out = np.empty(0)
    while out.size < n:
        draw = rng.normal(mean, std, size=2 * n)
        out = np.concatenate([out, draw[np.abs(draw - mean) <= 2 * std]])
    W = normalize_kernel(out[:n].reshape(t, c_in, K, K))
    return NWKernel(W, np.zeros(t))


@dataclass
class NWCache:
    shape: tuple
    cols_S: np.ndarray
    cols_M: np.ndarray
    W: np.ndarray
    num: np.ndarray
    den: np.ndarray
    eps: float


def nw_forward(S, M, kernel: NWKernel, eps=EPS):
    """Return ``(R, M_up, cache)`` for sparse input `S` and mask `M`, both ``(C, N, H, W)``."""
    S = np.asarray(S)
    M = np.asarray(M)
    if S.shape != M.shape:
        raise ValueError(f"signal {S.shape} and mask {M.shape} differ in shape")
    if S.ndim != 4 or S.shape[0] != kernel.c_in:
        raise ValueError(f"expected ({kernel.c_in}, N, H, W) input, got {S.shape}")
    W = kernel.W.astype(S.dtype, copy=False)
    num, cols_S = correlate(S, W)
    den, cols_M = correlate(M.astype(S.dtype, copy=False), np.abs(W))
    R = num / (den + eps) + kernel.b.astype(S.dtype, copy=False)[:, None, None, None]
    return R, den, NWCache(S.shape, cols_S, cols_M, W, num, den, eps)


def nw_backward(grad_R, cache: NWCache | None, grad_Mup=None, input_grad=True):
    """Return ``(grad_W, grad_b, grad_S, grad_M)``.

    `grad_Mup` is the gradient reaching the updated mask from a following NW
    layer (None after the last layer, where the mask is discarded). The
    derivative of ``|w|`` uses ``sign(w)`` with ``sign(0) = 0``. With
    ``input_grad=False`` the input gradients are skipped and returned as None.
    """
    if cache is None:
        raise StateError("nw_backward called without a forward cache")
    q = 1.0 / (cache.den + cache.eps)
    g_num = grad_R * q
    g_den = -grad_R * cache.num * q * q
    if grad_Mup is not None:
        g_den = g_den + grad_Mup
    W = cache.W
    grad_W = correlate_grad_w(cache.cols_S, g_num, W.shape) + np.sign(W) * correlate_grad_w(cache.cols_M, g_den, W.shape)
    grad_b = grad_R.sum(axis=(1, 2, 3))
    if not input_grad:
        return grad_W, grad_b, None, None
    grad_S = correlate_grad_x(g_num, W, cache.shape)
    grad_M = correlate_grad_x(g_den, np.abs(W), cache.shape)
    return grad_W, grad_b, grad_S, grad_M


def nw_forward_2d(S, M, W, b=0.0, eps=EPS):
    """Single-image convenience wrapper: 2-D `S`/`M`, 2-D kernel `W`."""
    kern = NWKernel(np.asarray(W, dtype=np.float64)[None, None], np.array([float(b)]))
    R, Mup, _ = nw_forward(np.asarray(S, dtype=np.float64)[None, None], np.asarray(M, dtype=np.float64)[None, None], kern, eps)
    return R[0, 0], Mup[0, 0]


def gaussian_kernel(sigma, truncate=3.0):
    """Frozen isotropic Gaussian window of half-width ``ceil(truncate*sigma)``."""
    k = int(np.ceil(truncate * sigma))
    i = np.arange(-k, k + 1)
    d2 = i[:, None] ** 2 + i[None, :] ** 2
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    w[d2 > (truncate * sigma) ** 2] = 0.0
    return w
