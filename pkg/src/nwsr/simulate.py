"""Synthetic HR/LR fibre-bundle video generation.

Pipeline per source image: grayscale -> sliding FoV crops (HR frames) ->
Voronoi-cell averaging per fibre -> multiplicative + additive noise ->
Delaunay reconstruction (LR frame) and sparse embedding (S, M).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from nwsr import baseline
from nwsr.imaging import (
    FiberLayout,
    LayoutError,
    SparseImage,
    as_image,
    round_half_away,
    sparsify,
)

LUMA = (0.299, 0.587, 0.114)
JITTER = 0.35


class CellEmptyError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    sigma_mult: float = 0.1
    sigma_add: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.sigma_mult < 0 or self.sigma_add < 0:
            raise ValueError("noise standard deviations must be non-negative")


@dataclass(frozen=True)
class VideoSequence:
    frames: tuple
    layout: FiberLayout

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError("a video needs at least one frame")
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise ValueError("all frames must share a shape")

    def __len__(self):
        return len(self.frames)


def to_grayscale(rgb):
    """ITU-R BT.601 luma of an ``(H, W, 3)`` image with channels in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return as_image(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    return as_image(LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2])


def frame_origins(length, box):
    stride = max(box // 2, 1)
    if length < box:
        return []
    return list(range(0, length - box + 1, stride))


def crop_frames(gray, layout: FiberLayout) -> VideoSequence:
    """Slide the FoV bounding box over `gray` at half-box stride, row-major."""
    gray = as_image(gray, "source")
    box = layout.box_size
    h, w = gray.shape
    if h < box or w < box:
        raise ValueError(f"source {w}x{h} is smaller than the {box}x{box} FoV box")
    frames = [gray[y : y + box, x : x + box].copy() for y in frame_origins(h, box) for x in frame_origins(w, box)]
    return VideoSequence(tuple(frames), layout)


def generate_layout(fov_radius, mean_spacing, seed) -> FiberLayout:
    """Jittered hexagonal fibre packing inside a circular FoV.

    Nodes whose nearest pixel would be claimed by a neighbour (or fall
    outside the FoV) are re-jittered a few times, then dropped.
    """
    if not (fov_radius > mean_spacing > 0):
        raise LayoutError("need fov_radius > mean_spacing > 0")
    rng = np.random.default_rng(seed)
    box = int(math.ceil(2 * fov_radius - 1e-9))
    c = (box - 1) / 2.0
    row_h = mean_spacing * math.sqrt(3) / 2
    nr = int(math.ceil(fov_radius / row_h)) + 1
    nc = int(math.ceil(fov_radius / mean_spacing)) + 1
    nodes = []
    for r in range(-nr, nr + 1):
        off = mean_spacing / 2 if r % 2 else 0.0
        for q in range(-nc - 1, nc + 1):
            nodes.append((c + q * mean_spacing + off, c + r * row_h))
    nodes = np.array(nodes)
    jit = JITTER * mean_spacing
    pts = nodes + rng.uniform(-jit, jit, size=nodes.shape)

    keep = np.ones(len(pts), dtype=bool)
    for _ in range(8):
        bad = _bad_nodes(pts, keep, c, fov_radius)
        if not bad.any():
            break
        pts[bad] = nodes[bad] + rng.uniform(-jit, jit, size=(int(bad.sum()), 2))
    while True:
        bad = _bad_nodes(pts, keep, c, fov_radius)
        if not bad.any():
            break
        keep &= ~bad
    centres = pts[keep]
    if len(centres) < 3:
        raise LayoutError("layout parameters yield fewer than 3 fibres")
    return FiberLayout(centres, (c, c), fov_radius)


def _bad_nodes(pts, keep, c, radius):
    """Kept nodes that are outside the FoV or do not own their own pixel."""
    d2 = (pts[:, 0] - c) ** 2 + (pts[:, 1] - c) ** 2
    inside = keep & (d2 < radius**2)
    px = round_half_away(pts).astype(np.float64)
    pd2 = (px[:, 0] - c) ** 2 + (px[:, 1] - c) ** 2
    bad = keep & ~inside
    cand = np.flatnonzero(inside)
    bad[cand[pd2[cand] > radius**2]] = True
    cand = np.flatnonzero(inside & ~bad)
    if len(cand) == 0:
        return bad
    owner = _nearest_fibre(px[cand], pts[cand])
    bad[cand[owner != np.arange(len(cand))]] = True
    return bad


def _nearest_fibre(query, centres, k=8):
    """Index of the nearest centre for each query point, ties to lowest index."""
    k = min(k, len(centres))
    _, idx = cKDTree(centres).query(query, k=k)
    idx = np.asarray(idx).reshape(len(query), k)
    idx = np.sort(idx, axis=1)
    cand = centres[idx]
    d2 = (query[:, None, 0] - cand[..., 0]) ** 2 + (query[:, None, 1] - cand[..., 1]) ** 2
    return idx[np.arange(len(query)), np.argmin(d2, axis=1)]


def voronoi_labels(layout: FiberLayout, width, height):
    """Per-pixel owning fibre index; -1 outside the FoV."""
    fov = layout.fov_mask(width, height)
    v, u = np.nonzero(fov)
    labels = np.full((height, width), -1, dtype=np.int64)
    if len(v):
        q = np.stack([u, v], axis=1).astype(np.float64)
        labels[v, u] = _nearest_fibre(q, np.asarray(layout.centres))
    return labels


def voronoi_downsample(hr, layout: FiberLayout, labels=None):
    """Mean HR intensity over each fibre's Voronoi cell (FoV pixels only)."""
    hr = as_image(hr, "hr")
    h, w = hr.shape
    px = layout.pixels
    if np.any(px < 0) or np.any(px[:, 0] >= w) or np.any(px[:, 1] >= h):
        raise ValueError("fibre centres must lie inside the HR frame")
    if labels is None:
        labels = voronoi_labels(layout, w, h)
    n = len(layout)
    on = labels >= 0
    counts = np.bincount(labels[on], minlength=n)
    if np.any(counts == 0):
        raise CellEmptyError(f"{int(np.sum(counts == 0))} fibre cell(s) contain no pixel")
    sums = np.bincount(labels[on], weights=hr[on], minlength=n)
    return sums / counts


def add_noise(signals, params: NoiseParams, stream=0):
    """``s * g + a`` with ``g ~ N(1, sigma_mult^2)`` and ``a ~ N(0, sigma_add^2)``."""
    s = np.asarray(signals, dtype=np.float64)
    if params.sigma_mult == 0 and params.sigma_add == 0:
        return s.copy()
    rng = np.random.default_rng([params.seed, stream])
    g = 1.0 + params.sigma_mult * rng.standard_normal(s.shape)
    a = params.sigma_add * rng.standard_normal(s.shape)
    return s * g + a


class Simulator:
    """Caches the per-layout geometry (Voronoi labels, triangulation)."""

    def __init__(self, layout: FiberLayout, width, height):
        self.layout = layout
        self.width = width
        self.height = height
        self.labels = voronoi_labels(layout, width, height)
        self.tri = baseline.delaunay_triangulate(layout)

    def simulate_lr(self, hr, params: NoiseParams, stream=0):
        hr = as_image(hr, "hr")
        if hr.shape != (self.height, self.width):
            raise ValueError(f"frame shape {hr.shape} does not match the simulator")
        signals = voronoi_downsample(hr, self.layout, self.labels)
        noisy = add_noise(signals, params, stream)
        lr = baseline.interpolate_linear(noisy, self.tri, self.width, self.height)
        sp = sparsify(noisy, self.layout, self.width, self.height)
        return lr, sp, noisy


def simulate_lr(hr, layout: FiberLayout, params: NoiseParams, stream=0) -> tuple[np.ndarray, SparseImage]:
    """Physically inspired LR frame plus the sparse fibre image it came from."""
    hr = as_image(hr, "hr")
    lr, sp, _ = Simulator(layout, hr.shape[1], hr.shape[0]).simulate_lr(hr, params, stream)
    return lr, sp


# Ruifrok-Johnston optical density vectors for haematoxylin and eosin
_OD_H = np.array([0.65, 0.70, 0.29])
_OD_E = np.array([0.07, 0.99, 0.11])


def synthetic_source(size, seed, nucleus_radius=(3.0, 6.0), nucleus_density=1 / 200):
    """Procedural H&E-like RGB image in [0, 1], standing in for histology.

    Fibrous eosin-stained stroma (thresholded anisotropic noise) with
    sharp-edged haematoxylin nuclei, rendered by Beer-Lambert absorption.
    Returned as ``(size, size, 3)``.
    """
    rng = np.random.default_rng(seed)
    n = int(size)
    m = int(math.ceil(n * 1.5))
    f = ndimage.gaussian_filter(rng.standard_normal((m, m)), (2.0, 7.0), mode="wrap")
    f = ndimage.rotate(f, rng.uniform(0, 180), reshape=False, order=1)
    o = (m - n) // 2
    f = f[o : o + n, o : o + n]
    f = (f - f.mean()) / f.std()
    stroma = 1.0 / (1.0 + np.exp(-3.0 * f))
    haze = ndimage.gaussian_filter(rng.standard_normal((n, n)), 12.0, mode="wrap")
    haze = (haze - haze.mean()) / haze.std()

    yy, xx = np.mgrid[0:n, 0:n]
    nuclei = np.zeros((n, n))
    for _ in range(int(n * n * nucleus_density)):
        cx, cy = rng.uniform(0, n, 2)
        a = rng.uniform(*nucleus_radius)
        b = a * rng.uniform(0.55, 0.95)
        th = rng.uniform(0, np.pi)
        R = int(a) + 3
        sl = slice(int(max(cy - R, 0)), int(min(cy + R + 1, n))), slice(int(max(cx - R, 0)), int(min(cx + R + 1, n)))
        sx = xx[sl] - cx
        sy = yy[sl] - cy
        r = np.hypot((sx * np.cos(th) + sy * np.sin(th)) / a, (-sx * np.sin(th) + sy * np.cos(th)) / b)
        nuclei[sl] = np.maximum(nuclei[sl], np.clip((1 - r) / 0.15 + 0.5, 0, 1))
    nuclei = ndimage.gaussian_filter(nuclei, 0.5)

    eosin = np.clip(2.2 * stroma + 0.08 * haze, 0, None)
    haem = 3.0 * nuclei + 0.05 * stroma
    od = haem[..., None] * _OD_H + eosin[..., None] * _OD_E
    return np.clip(np.exp(-od), 0.0, 1.0)
