"""Dataset directories and the glue between simulation, models and metrics.

A dataset directory (written by ``simulate``) holds, per frame ``####``::

    hr_####.png  lr_####.png  sparse_####.png  mask_####.png  signals_####.csv

(the CSV holds the noisy fibre signals in layout order, full precision) plus ``layout.csv`` and ``frames.csv`` (frame -> source video index). All
method outputs are shown through the circular FoV: pixels outside it are 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nwsr import baseline, simulate
from nwsr.imaging import (
    FiberLayout,
    NormStats,
    SparseImage,
    normalize_frame,
    normalize_sparse,
    read_layout_csv,
    read_png,
    read_signals,
    write_layout_csv,
    write_png,
)
from nwsr.network import Network
from nwsr.train import PatchSet, extract_patches

MODES = ("cart", "sparse", "nw")


@dataclass
class Frame:
    hr: np.ndarray
    lr: np.ndarray
    sparse: SparseImage
    video: int = 0


@dataclass
class Dataset:
    frames: list
    layout: FiberLayout

    @property
    def shape(self):
        return self.frames[0].hr.shape

    def fov(self):
        h, w = self.shape
        return self.layout.fov_mask(w, h)


def simulate_dataset(sources, layout: FiberLayout, noise: simulate.NoiseParams) -> Dataset:
    """Simulate every FoV crop of every grayscale source; noise stream = frame index."""
    box = layout.box_size
    sim = simulate.Simulator(layout, box, box)
    fov = layout.fov_mask(box, box)
    frames = []
    for v, src in enumerate(sources):
        for hr in simulate.crop_frames(src, layout).frames:
            hr = hr * fov
            lr, sp, _ = sim.simulate_lr(hr, noise, stream=len(frames))
            frames.append(Frame(hr, lr, sp, v))
    return Dataset(frames, layout)


def write_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_layout_csv(out / "layout.csv", ds.layout)
    rows = []
    for i, f in enumerate(ds.frames):
        write_png(out / f"hr_{i:04d}.png", f.hr)
        write_png(out / f"lr_{i:04d}.png", f.lr)
        write_png(out / f"sparse_{i:04d}.png", f.sparse.S)
        write_png(out / f"mask_{i:04d}.png", f.sparse.M, bits=8)
        write_signals_csv(out / f"signals_{i:04d}.csv", read_signals(f.sparse, ds.layout))
        rows.append((f"{i:04d}", f.video))
    with open(out / "frames.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "video"])
        w.writerows(rows)


def write_signals_csv(path, signals):
    lines = ["signal"] + [repr(float(v)) for v in signals]
    Path(path).write_text("\n".join(lines) + "\n")


def read_signals_csv(path):
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != "signal":
        raise ValueError(f"{path}: expected a 'signal' header")
    try:
        return np.array([float(v) for v in lines[1:]])
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None


def read_dataset(path) -> Dataset:
    d = Path(path)
    layout = read_layout_csv(d / "layout.csv")
    with open(d / "frames.csv", newline="") as fh:
        index = [(r["frame"], int(r["video"])) for r in csv.DictReader(fh)]
    frames = []
    for name, video in index:
        M = (read_png(d / f"mask_{name}.png") > 0.5).astype(np.float64)
        S = read_png(d / f"sparse_{name}.png") * M
        frames.append(Frame(read_png(d / f"hr_{name}.png"), read_png(d / f"lr_{name}.png"), SparseImage(S, M), video))
    if not frames:
        raise ValueError(f"{d}: dataset has no frames")
    return Dataset(frames, layout)


@dataclass
class NormalizedFrame:
    lr: np.ndarray
    hr: np.ndarray
    sparse: SparseImage
    stats: NormStats


def normalized(ds: Dataset):
    out = []
    for f in ds.frames:
        lr, hr, st = normalize_frame(f.lr, f.hr)
        out.append(NormalizedFrame(lr, hr, normalize_sparse(f.sparse, st), st))
    return out


def model_input(nf: NormalizedFrame, mode):
    """``(input, mask)`` a model of the given mode consumes."""
    if mode == "cart":
        return nf.lr, None
    if mode == "sparse":
        return nf.sparse.S, None
    if mode == "nw":
        return nf.sparse.S, nf.sparse.M
    raise ValueError(f"unknown mode {mode!r}")


def patches_for(ds: Dataset, mode, size=64) -> PatchSet:
    nfs = normalized(ds)
    inputs, masks = zip(*(model_input(nf, mode) for nf in nfs))
    return extract_patches(inputs, [nf.hr for nf in nfs], masks if mode == "nw" else None, size)


def arch_for(mode):
    return "nwnet_sr" if mode == "nw" else "cnnnet_sr"


def predict_dataset(net: Network, ds: Dataset, mode, dtype=np.float64):
    """Model outputs per frame, mapped back to raw intensity and FoV-masked."""
    fov = ds.fov()
    out = []
    for nf in normalized(ds):
        x, m = model_input(nf, mode)
        out.append(nf.stats.invert(net.predict(x, m, dtype)) * fov)
    return out


def reconstruct_dataset(ds: Dataset, method, sigma=None):
    """Baseline reconstruction of every frame from its fibre signals."""
    h, w = ds.shape
    fov = ds.fov()
    if method == "delaunay":
        tri = baseline.delaunay_triangulate(ds.layout)
        W = tri.pixel_weights(w, h)
    elif method == "nwgauss":
        W = None
    else:
        raise ValueError(f"unknown baseline {method!r}")
    px = ds.layout.pixels
    out = []
    for f in ds.frames:
        s = f.sparse.S[px[:, 1], px[:, 0]]
        if method == "delaunay":
            out.append((W @ s).reshape(h, w) * fov)
        else:
            if W is None:
                sig = sigma if sigma is not None else baseline.default_sigma(mean_spacing(ds.layout))
                W = baseline.gaussian_weights(ds.layout, sig, w, h)
            out.append(baseline.nw_gaussian_reconstruct(s, ds.layout, None, w, h, weights=W) * fov)
    return out


def mean_spacing(layout: FiberLayout):
    """Hexagonal-packing spacing implied by fibre density over the FoV."""
    area = np.pi * layout.fov_radius**2
    return float(np.sqrt(area / (len(layout) * np.sqrt(3) / 2)))


def evaluation_pairs(ds: Dataset, outputs, domain="normalized"):
    """``(pred, ref)`` frame pairs in the evaluation intensity domain."""
    if domain == "raw":
        return list(outputs), [f.hr for f in ds.frames]
    nfs = normalized(ds)
    return [nf.stats.apply(o) for nf, o in zip(nfs, outputs)], [nf.hr for nf in nfs]
