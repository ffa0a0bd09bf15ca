"""Central finite-difference checks of the analytic backward passes (float64)."""

from __future__ import annotations

import numpy as np

from nwsr import nwlayer
from nwsr.network import ArchSpec, Conv, Network
from nwsr.train import ssim_l1_loss

H = 1e-5


def rel_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_grad(f, x, idx, h=H):
    """Central differences of scalar ``f()`` w.r.t. flat entries `idx` of array `x` (mutated in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def _pick(rng, size, n):
    return np.arange(size) if size <= n else rng.choice(size, n, replace=False)


def check_nw(c_in=2, t=3, k=1, seed=0, size=8, batch=2, n=60):
    """Max relative error of dW, db, dS, dM for ``sum(G R) + sum(Q M_up)``."""
    rng = np.random.default_rng(seed)
    kern = nwlayer.init_nw_kernel(t, c_in, k, rng)
    # signed weights, |w| >= 1e-3 so |w| is differentiable at every step
    kern.W *= np.where(rng.random(kern.W.shape) < 0.3, -1.0, 1.0)
    kern.W[np.abs(kern.W) < 1e-3] = 1e-3
    kern.b[:] = rng.normal(size=t)
    shape = (c_in, batch, size, size)
    M = rng.uniform(0.2, 1.0, shape) * (rng.random(shape) < 0.6)
    S = rng.normal(size=shape) * (M > 0)
    G = rng.normal(size=(t, batch, size, size))
    Q = rng.normal(size=(t, batch, size, size))

    def f():
        R, Mup, _ = nwlayer.nw_forward(S, M, kern)
        return float(np.sum(G * R) + np.sum(Q * Mup))

    _, _, cache = nwlayer.nw_forward(S, M, kern)
    gW, gb, gS, gM = nwlayer.nw_backward(G, cache, Q)
    errs = []
    for x, g in ((kern.W, gW), (kern.b, gb), (S, gS), (M, gM)):
        idx = _pick(rng, x.size, n)
        errs.append(rel_error(g.reshape(-1)[idx], numeric_grad(f, x, idx)))
    return max(errs)


def check_conv(c_in=2, t=3, k=1, seed=0, size=8, batch=2, n=60):
    rng = np.random.default_rng(seed)
    conv = Conv("c", c_in, t, k, rng)
    conv.b.value[:] = rng.normal(size=t)
    x = rng.normal(size=(c_in, batch, size, size))
    G = rng.normal(size=(t, batch, size, size))

    def f():
        return float(np.sum(G * conv.forward(x)))

    conv.forward(x)
    gx = conv.backward(G)
    errs = []
    for arr, g in ((conv.W.value, conv.W.grad), (conv.b.value, conv.b.grad), (x, gx)):
        idx = _pick(rng, arr.size, n)
        errs.append(rel_error(g.reshape(-1)[idx], numeric_grad(f, arr, idx)))
    return max(errs)


def check_loss(seed=0, size=16, batch=2, n=80):
    rng = np.random.default_rng(seed)
    target = rng.random((batch, 1, size, size))
    pred = np.clip(target + 0.1 * rng.normal(size=target.shape), 0, 1)
    _, g = ssim_l1_loss(pred, target)
    idx = _pick(rng, pred.size, n)
    return rel_error(g.reshape(-1)[idx], numeric_grad(lambda: ssim_l1_loss(pred, target)[0], pred, idx))


def check_network(arch="nwnet_sr", blocks=4, filters=16, seed=0, size=16, batch=2, n=200):
    """Whole-network check on `n` sampled parameter coordinates."""
    rng = np.random.default_rng(seed)
    net = Network(ArchSpec(arch, blocks, filters, 3, 1, seed))
    shape = (batch, 1, size, size)
    mask = (rng.random(shape) < 0.4).astype(np.float64) if net.uses_mask else None
    x = rng.random(shape) * (mask if mask is not None else 1.0)
    G = rng.normal(size=shape)
    flat = net.get_flat()

    def f():
        net.set_flat(flat)
        return float(np.sum(G * net.forward(x, mask)))

    net.zero_grad()
    net.forward(x, mask)
    net.backward(G)
    grads = np.concatenate([p.grad.ravel() for p in net.params])
    idx = _pick(rng, flat.size, n)
    num = numeric_grad(f, flat, idx)
    net.set_flat(flat)
    return rel_error(grads[idx], num)
