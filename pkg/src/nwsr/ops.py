"""Size-preserving 2-D cross-correlation and its adjoints.

Batches are channel-major, ``(C, N, H, W)``, so that im2col is ``K*K``
contiguous slice copies and the convolution is a single GEMM. Borders are
zero padded.
"""

import numpy as np


def im2col(x, K):
    """``(C*K*K, N*H*W)`` column matrix of the zero-padded input."""
    C, N, H, W = x.shape
    k = K // 2
    xp = np.pad(x, ((0, 0), (0, 0), (k, k), (k, k))) if k else x
    cols = np.empty((C, K, K, N, H, W), dtype=x.dtype)
    for i in range(K):
        for j in range(K):
            cols[:, i, j] = xp[:, :, i : i + H, j : j + W]
    return cols.reshape(C * K * K, N * H * W)


def col2im(cols, shape, K):
    """Adjoint of `im2col`: scatter-add columns back onto a ``shape`` batch."""
    C, N, H, W = shape
    k = K // 2
    cols = cols.reshape(C, K, K, N, H, W)
    out = np.zeros((C, N, H + 2 * k, W + 2 * k), dtype=cols.dtype)
    for i in range(K):
        for j in range(K):
            out[:, :, i : i + H, j : j + W] += cols[:, i, j]
    return out[:, :, k : k + H, k : k + W]


def correlate(x, w, cols=None):
    """``out[t,n,u,v] = sum_{c,i,j} x[c,n,u+i,v+j] * w[t,c,i,j]``, i,j in [-k, k].

    Returns ``(out, cols)`` so callers can reuse the columns in backward.
    """
    T, C, K, _ = w.shape
    if x.shape[0] != C:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {C}")
    if cols is None:
        cols = im2col(x, K)
    out = (w.reshape(T, -1) @ cols).reshape((T,) + x.shape[1:])
    return out, cols


def correlate_grad_w(cols, g, w_shape):
    """Gradient of ``sum(g * correlate(x, w))`` w.r.t. ``w``, given ``im2col(x)``."""
    return (g.reshape(g.shape[0], -1) @ cols.T).reshape(w_shape)


def correlate_grad_x(g, w, x_shape):
    """Gradient of ``sum(g * correlate(x, w))`` w.r.t. ``x``."""
    T = w.shape[0]
    return col2im(w.reshape(T, -1).T @ g.reshape(T, -1), x_shape, w.shape[-1])
