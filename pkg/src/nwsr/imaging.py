"""Image, mask and fibre-layout types shared by the rest of the package.

Conventions
-----------
Images are 2-D ``float64`` arrays indexed ``[v, u]`` (row, column). Pixel
``(u, v)`` has its centre at grid coordinate ``(x=u, y=v)``, so a fibre at
``(x, y)`` lands on pixel ``(round(x), round(y))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class LayoutError(ValueError):
    pass


class CollisionError(ValueError):
    pass


class BoundsError(ValueError):
    pass


class DegenerateFrameError(ValueError):
    pass


def as_image(a, name="image"):
    """Validate and return `a` as a finite 2-D float64 array."""
    img = np.asarray(a, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


@dataclass(frozen=True)
class FiberLayout:
    """Fibre centres (sub-pixel, grid units) inside a circular field of view."""

    centres: np.ndarray
    fov_centre: tuple[float, float]
    fov_radius: float

    def __post_init__(self):
        c = np.array(self.centres, dtype=np.float64).reshape(-1, 2)
        c.setflags(write=False)
        object.__setattr__(self, "centres", c)
        object.__setattr__(self, "fov_centre", (float(self.fov_centre[0]), float(self.fov_centre[1])))
        object.__setattr__(self, "fov_radius", float(self.fov_radius))
        if len(c) < 3:
            raise LayoutError(f"a fibre layout needs at least 3 centres, got {len(c)}")
        if not np.all(np.isfinite(c)):
            raise LayoutError("fibre centres must be finite")
        d2 = (c[:, 0] - self.fov_centre[0]) ** 2 + (c[:, 1] - self.fov_centre[1]) ** 2
        if np.any(d2 >= self.fov_radius**2):
            raise LayoutError("all fibre centres must lie strictly inside the field of view")
        if len(np.unique(self.pixels, axis=0)) != len(c):
            raise CollisionError("two fibre centres round to the same pixel")

    def __len__(self):
        return len(self.centres)

    @property
    def pixels(self):
        """Nearest pixel ``(u, v)`` of every centre, shape ``(n, 2)``."""
        return round_half_away(self.centres)

    @property
    def box_size(self):
        """Side of the square bounding box of the field of view."""
        return int(math.ceil(2 * self.fov_radius - 1e-9))

    def fov_mask(self, width, height):
        """Boolean map of pixel centres inside (or on) the FoV circle."""
        v, u = np.mgrid[0:height, 0:width]
        cx, cy = self.fov_centre
        return (u - cx) ** 2 + (v - cy) ** 2 <= self.fov_radius**2


@dataclass(frozen=True)
class SparseImage:
    """Irregular samples embedded on the grid (`S`) with their mask (`M`)."""

    S: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        if self.S.shape != self.M.shape:
            raise ValueError("S and M must share a shape")
        if np.any(self.M < 0) or not np.all(np.isfinite(self.M)):
            raise ValueError("mask values must be finite and non-negative")
        if np.any(self.S[self.M == 0] != 0):
            raise ValueError("S must be zero wherever M is zero")


@dataclass(frozen=True)
class NormStats:
    mean_lr: float
    std_lr: float
    scale_min: float
    scale_max: float

    def __post_init__(self):
        if not self.std_lr > 0:
            raise DegenerateFrameError("std_lr must be positive")
        if not self.scale_max > self.scale_min:
            raise DegenerateFrameError("scale_max must exceed scale_min")

    def apply(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean_lr) / self.std_lr
        return (z - self.scale_min) / (self.scale_max - self.scale_min)

    def invert(self, y):
        z = np.asarray(y, dtype=np.float64) * (self.scale_max - self.scale_min) + self.scale_min
        return z * self.std_lr + self.mean_lr


IDENTITY_STATS = NormStats(0.0, 1.0, 0.0, 1.0)


def sparsify(signals, layout: FiberLayout, width, height) -> SparseImage:
    """Place each fibre signal on its nearest pixel; mask marks those pixels."""
    signals = np.asarray(signals, dtype=np.float64).ravel()
    if len(signals) != len(layout):
        raise ValueError(f"expected {len(layout)} signals, got {len(signals)}")
    px = layout.pixels
    if np.any(px[:, 0] < 0) or np.any(px[:, 0] >= width) or np.any(px[:, 1] < 0) or np.any(px[:, 1] >= height):
        raise BoundsError("a fibre centre falls outside the image")
    S = np.zeros((height, width))
    M = np.zeros((height, width))
    M[px[:, 1], px[:, 0]] += 1.0
    if M.max() > 1:
        raise CollisionError("two fibre centres round to the same pixel")
    S[px[:, 1], px[:, 0]] = signals
    return SparseImage(S, M)


def read_signals(sparse: SparseImage, layout: FiberLayout):
    px = layout.pixels
    return sparse.S[px[:, 1], px[:, 0]].copy()


def normalize_frame(lr, hr):
    """Standardise by the LR frame statistics, then min-max the LR into [0, 1].

    The HR frame goes through the identical affine map, so it may leave
    [0, 1]; it is not clamped.
    """
    lr = as_image(lr, "lr")
    hr = as_image(hr, "hr")
    if lr.shape != hr.shape:
        raise ValueError(f"lr {lr.shape} and hr {hr.shape} differ in shape")
    mean = float(lr.mean())
    std = float(lr.std())
    if not std > 0 or not np.isfinite(std):
        raise DegenerateFrameError("constant LR frame cannot be normalised")
    z = (lr - mean) / std
    stats = NormStats(mean, std, float(z.min()), float(z.max()))
    lr_n = (z - stats.scale_min) / (stats.scale_max - stats.scale_min)
    return lr_n, stats.apply(hr), stats


def denormalize(img, stats: NormStats):
    return stats.invert(img)


def normalize_sparse(sparse: SparseImage, stats: NormStats) -> SparseImage:
    """Apply a frame's normalisation to the informative pixels only."""
    on = sparse.M > 0
    S = np.where(on, stats.apply(sparse.S), 0.0)
    return SparseImage(S, sparse.M.copy())


# --- file I/O -------------------------------------------------------------


def write_png(path, img, bits=16):
    """Write a [0, 1] image as grayscale PNG; values outside are clipped."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        arr = np.round(img * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(path)
    elif bits == 8:
        arr = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def read_png(path):
    """Read a grayscale PNG as float64 in [0, 1], or RGB as ``(H, W, 3)``."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        if im.mode in ("RGB", "RGBA", "P"):
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        raise ValueError(f"unsupported PNG mode {im.mode}")


def write_layout_csv(path, layout: FiberLayout):
    cx, cy = layout.fov_centre
    lines = [f"# fov_cx,fov_cy,fov_r={cx!r},{cy!r},{layout.fov_radius!r}"]
    lines += [f"{x!r},{y!r}" for x, y in layout.centres.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_layout_csv(path) -> FiberLayout:
    fov = None
    centres = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            _, _, values = line.partition("=")
            fov = [float(v) for v in values.split(",")]
            continue
        x, y = line.split(",")
        centres.append((float(x), float(y)))
    if fov is None or len(fov) != 3:
        raise LayoutError(f"{path}: missing '# fov_cx,fov_cy,fov_r=' header")
    return FiberLayout(np.array(centres), (fov[0], fov[1]), fov[2])
