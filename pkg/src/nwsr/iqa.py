"""Reference-based image quality: PSNR and SSIM, plus per-video summaries.

SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated only where the
window fits inside the image ("valid" positions), with
``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WIN = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def gaussian_window(size=WIN, sigma=SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma * sigma))
    return g / g.sum()


_G = gaussian_window()


def _filt(x):
    """Separable valid-mode Gaussian filter over the last two axes."""
    x = np.tensordot(sliding_window_view(x, WIN, axis=-1), _G, axes=([-1], [0]))
    return np.tensordot(sliding_window_view(x, WIN, axis=-2), _G, axes=([-1], [0]))


def _filt_adj(y):
    """Adjoint of `_filt` (maps valid-size maps back to full size)."""
    p = WIN - 1
    pad = [(0, 0)] * (y.ndim - 2) + [(p, p), (p, p)]
    return _filt(np.pad(y, pad))  # the window is symmetric


def _check(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if pred.shape[-1] < WIN or pred.shape[-2] < WIN:
        raise ValueError(f"images must be at least {WIN}x{WIN} for SSIM")
    return pred, ref


def _ssim_terms(x, y, data_range):
    C1 = (K1 * data_range) ** 2
    C2 = (K2 * data_range) ** 2
    mx, my = _filt(x), _filt(y)
    exx, eyy, exy = _filt(x * x), _filt(y * y), _filt(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    A1, A2 = 2 * mx * my + C1, 2 * cxy + C2
    B1, B2 = mx * mx + my * my + C1, vx + vy + C2
    return mx, my, A1, A2, B1, B2


def ssim_map(pred, ref, data_range=1.0):
    pred, ref = _check(pred, ref)
    _, _, A1, A2, B1, B2 = _ssim_terms(pred, ref, data_range)
    return (A1 * A2) / (B1 * B2)


def ssim(pred, ref, data_range=1.0):
    """Mean SSIM over all valid window positions."""
    return float(ssim_map(pred, ref, data_range).mean())


def ssim_and_grad(pred, ref, data_range=1.0):
    """Mean SSIM over the last two axes and its gradient w.r.t. `pred`.

    Leading axes are treated as a batch; the returned value has the batch
    shape and the gradient is that of each item's own mean.
    """
    x, y = _check(pred, ref)
    mx, my, A1, A2, B1, B2 = _ssim_terms(x, y, data_range)
    S = (A1 * A2) / (B1 * B2)
    n = S.shape[-1] * S.shape[-2]
    # partials of the SSIM map w.r.t. local mean(x), E[x^2] and E[xy]
    d_mx = (2 * my * (A2 - A1) / (B1 * B2) - 2 * mx * S * (1 / B1 - 1 / B2)) / n
    d_exx = -S / B2 / n
    d_exy = 2 * A1 / (B1 * B2) / n
    grad = _filt_adj(d_mx) + 2 * x * _filt_adj(d_exx) + y * _filt_adj(d_exy)
    return S.mean(axis=(-2, -1)), grad


def psnr(pred, ref, data_range=1.0):
    """``10 log10(L^2 / MSE)``; identical images give ``inf``."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


@dataclass
class IQAReport:
    psnr: list[float]
    ssim: list[float]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.psnr) != len(self.ssim):
            raise ValueError("per-frame PSNR and SSIM lists differ in length")
        if not self.names:
            self.names = [str(i) for i in range(len(self.psnr))]

    @property
    def n_inf(self):
        return sum(1 for p in self.psnr if math.isinf(p))

    @property
    def psnr_mean(self):
        finite = [p for p in self.psnr if math.isfinite(p)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def psnr_std(self):
        finite = [p for p in self.psnr if math.isfinite(p)]
        return float(np.std(finite)) if finite else 0.0

    @property
    def ssim_mean(self):
        return float(np.mean(self.ssim))

    @property
    def ssim_std(self):
        return float(np.std(self.ssim))


def evaluate_frames(sr_frames, hr_frames, data_range=1.0, names=None) -> IQAReport:
    sr_frames, hr_frames = list(sr_frames), list(hr_frames)
    if len(sr_frames) != len(hr_frames):
        raise ValueError(f"{len(sr_frames)} SR frames vs {len(hr_frames)} HR frames")
    ps, ss = [], []
    for a, b in zip(sr_frames, hr_frames):
        ps.append(psnr(a, b, data_range))
        ss.append(ssim(a, b, data_range))
    return IQAReport(ps, ss, list(names) if names else [])


def evaluate_video(sr, hr, data_range=1.0) -> IQAReport:
    """Per-frame metrics for two equally long `VideoSequence`s."""
    return evaluate_frames(sr.frames, hr.frames, data_range)


def format_value(x):
    return "inf" if math.isinf(x) else repr(float(x))


def write_report_csv(path, report: IQAReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "psnr_db", "ssim"])
        for name, p, s in zip(report.names, report.psnr, report.ssim):
            w.writerow([name, format_value(p), format_value(s)])
        w.writerow(["mean", format_value(report.psnr_mean), format_value(report.ssim_mean)])
        w.writerow(["std", format_value(report.psnr_std), format_value(report.ssim_std)])


def read_report_csv(path):
    """Return ``(report, summary)`` where summary maps mean/std to (psnr, ssim)."""
    names, ps, ss, summary = [], [], [], {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame", "psnr_db", "ssim"]:
        raise ValueError(f"{path}: not an evaluation report")
    for name, p, s in rows[1:]:
        if name in ("mean", "std"):
            summary[name] = (float(p), float(s))
        else:
            names.append(name)
            ps.append(float(p))
            ss.append(float(s))
    return IQAReport(ps, ss, names), summary
