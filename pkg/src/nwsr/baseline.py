"""Non-learned reconstructions: Delaunay linear interpolation and Gaussian NW.

Both reconstructors precompute a sparse ``pixels x fibres`` weight matrix per
layout, so reconstructing many frames over one fibre layout is a single
sparse mat-vec per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from nwsr.imaging import FiberLayout

INCIRCLE_RTOL = 1e-12
EDGE_TOL = 1e-12


class DegeneracyError(ValueError):
    pass


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _circumcircle(a, b, c):
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    return ux, uy, (ax - ux) ** 2 + (ay - uy) ** 2


@dataclass
class Triangulation:
    """Triangles (CCW index triples) over `vertices` plus barycentric maps."""

    vertices: np.ndarray
    triangles: np.ndarray
    _weights: dict = field(default_factory=dict, repr=False, compare=False)

    @cached_property
    def bary(self):
        """Per-triangle inverse of ``[[x1-x3, x2-x3], [y1-y3, y2-y3]]``."""
        p = self.vertices[self.triangles]
        T = np.stack([p[:, 0] - p[:, 2], p[:, 1] - p[:, 2]], axis=2)
        return np.linalg.inv(T)

    def barycentric(self, t, x, y):
        p3 = self.vertices[self.triangles[t, 2]]
        l12 = self.bary[t] @ np.array([x - p3[0], y - p3[1]])
        return np.array([l12[0], l12[1], 1.0 - l12[0] - l12[1]])

    def pixel_weights(self, width, height):
        """Sparse ``(height*width, n_vertices)`` barycentric weight matrix.

        Rows of pixels outside the hull are empty. A pixel on a shared edge
        goes to the lowest-indexed triangle containing it.
        """
        key = (int(width), int(height))
        if key not in self._weights:
            self._weights[key] = _rasterize(self, width, height)
        return self._weights[key]


def _rasterize(tri: Triangulation, width, height):
    owner = np.full((height, width), -1, dtype=np.int64)
    lam = np.zeros((height, width, 3))
    verts = tri.vertices
    for t, (i, j, k) in enumerate(tri.triangles):
        xs = verts[[i, j, k], 0]
        ys = verts[[i, j, k], 1]
        u0, u1 = max(0, math.ceil(xs.min() - EDGE_TOL)), min(width - 1, math.floor(xs.max() + EDGE_TOL))
        v0, v1 = max(0, math.ceil(ys.min() - EDGE_TOL)), min(height - 1, math.floor(ys.max() + EDGE_TOL))
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1]
        dx = uu - verts[k, 0]
        dy = vv - verts[k, 1]
        B = tri.bary[t]
        l1 = B[0, 0] * dx + B[0, 1] * dy
        l2 = B[1, 0] * dx + B[1, 1] * dy
        l3 = 1.0 - l1 - l2
        inside = (l1 >= -EDGE_TOL) & (l2 >= -EDGE_TOL) & (l3 >= -EDGE_TOL)
        inside &= owner[v0 : v1 + 1, u0 : u1 + 1] < 0
        if not inside.any():
            continue
        sub_v, sub_u = vv[inside], uu[inside]
        owner[sub_v, sub_u] = t
        lam[sub_v, sub_u] = np.stack([l1[inside], l2[inside], l3[inside]], axis=1)

    # pixels sitting exactly on a vertex take that vertex's value verbatim
    for idx, (x, y) in enumerate(verts):
        if x == int(x) and y == int(y) and 0 <= x < width and 0 <= y < height:
            t = owner[int(y), int(x)]
            if t >= 0:
                corner = list(tri.triangles[t]).index(idx)
                lam[int(y), int(x)] = 0.0
                lam[int(y), int(x), corner] = 1.0

    rows = np.flatnonzero(owner.ravel() >= 0)
    tris = owner.ravel()[rows]
    cols = tri.triangles[tris]
    vals = lam.reshape(-1, 3)[rows]
    return sparse.csr_matrix(
        (vals.ravel(), (np.repeat(rows, 3), cols.ravel())),
        shape=(height * width, len(verts)),
    )


def delaunay_triangulate(layout_or_points) -> Triangulation:
    """Incremental Bowyer-Watson triangulation with a super-triangle.

    The in-circumcircle test carries a relative tolerance of
    ``INCIRCLE_RTOL``; predicates are plain floating point, not exact.
    """
    if isinstance(layout_or_points, FiberLayout):
        pts = np.asarray(layout_or_points.centres, dtype=np.float64)
    else:
        pts = np.asarray(layout_or_points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 3:
        raise DegeneracyError("need at least 3 points")
    if np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-10 * max(1.0, np.ptp(pts))) < 2:
        raise DegeneracyError("all points are collinear")

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    mid = (lo + hi) / 2
    span = max(float((hi - lo).max()), 1.0) * 1e3
    P = np.vstack([pts, [mid[0] - 2 * span, mid[1] - span], [mid[0] + 2 * span, mid[1] - span], [mid[0], mid[1] + 2 * span]])

    cap = 8 * n + 16
    tv = np.zeros((cap, 3), dtype=np.int64)
    cc = np.zeros((cap, 3))
    alive = np.zeros(cap, dtype=bool)
    count = 0

    def add(a, b, c):
        nonlocal tv, cc, alive, count
        if _orient(P[a], P[b], P[c]) < 0:
            b, c = c, b
        if count == len(tv):
            tv = np.vstack([tv, np.zeros_like(tv)])
            cc = np.vstack([cc, np.zeros_like(cc)])
            alive = np.concatenate([alive, np.zeros_like(alive)])
        tv[count] = (a, b, c)
        cc[count] = _circumcircle(P[a], P[b], P[c])
        alive[count] = True
        count += 1

    add(n, n + 1, n + 2)
    for p in range(n):
        x, y = P[p]
        live = np.flatnonzero(alive[:count])
        d2 = (cc[live, 0] - x) ** 2 + (cc[live, 1] - y) ** 2
        bad = live[d2 < cc[live, 2] * (1.0 - INCIRCLE_RTOL)]
        bad = _connected_cavity(P, tv, bad, P[p])
        edges: dict[tuple[int, int], int] = {}
        for t in bad:
            a, b, c = tv[t]
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                edges[key] = edges.get(key, 0) + 1
        alive[bad] = False
        for (a, b), k in edges.items():
            if k == 1:
                add(a, b, p)

    tris = tv[:count][alive[:count]]
    tris = tris[np.all(tris < n, axis=1)]
    tris = _fill_hull(pts, tris)
    return Triangulation(pts, np.ascontiguousarray(tris))


def _connected_cavity(P, tv, bad, p):
    """Keep the bad triangles edge-connected to the one containing `p`."""
    if len(bad) <= 1:
        return bad
    seed = None
    for t in bad:
        a, b, c = tv[t]
        if _orient(P[a], P[b], p) >= 0 and _orient(P[b], P[c], p) >= 0 and _orient(P[c], P[a], p) >= 0:
            seed = t
            break
    if seed is None:
        return bad
    by_edge: dict[tuple[int, int], list[int]] = {}
    for t in bad:
        a, b, c = tv[t]
        for e in ((a, b), (b, c), (c, a)):
            by_edge.setdefault((min(e), max(e)), []).append(t)
    keep = {seed}
    stack = [seed]
    while stack:
        t = stack.pop()
        a, b, c = tv[t]
        for e in ((a, b), (b, c), (c, a)):
            for o in by_edge[(min(e), max(e))]:
                if o not in keep:
                    keep.add(o)
                    stack.append(o)
    return np.array(sorted(keep), dtype=np.int64)


def _fill_hull(pts, tris):
    """Close reflex notches left on the boundary by the finite super-triangle."""
    tris = [tuple(t) for t in tris]
    while True:
        edges = {}
        for a, b, c in tris:
            for e in ((a, b), (b, c), (c, a)):
                edges[e] = True
        boundary = {a: b for (a, b) in edges if (b, a) not in edges}
        added = False
        for a, b in list(boundary.items()):
            c = boundary.get(b)
            if c is None or c == a:
                continue
            # CCW interior is on the left; a right turn a->b->c marks a notch
            if _orient(pts[a], pts[b], pts[c]) < -1e-12 * (1 + np.abs(pts).max()) ** 2:
                tris.append((a, c, b))
                added = True
                break
        if not added:
            return np.array(tris, dtype=np.int64).reshape(-1, 3)


def interpolate_linear(signals, tri: Triangulation, width, height):
    """Barycentric interpolation of fibre signals; zero outside the hull."""
    s = np.asarray(signals, dtype=np.float64).ravel()
    if len(s) != len(tri.vertices):
        raise ValueError(f"expected {len(tri.vertices)} signals, got {len(s)}")
    W = tri.pixel_weights(width, height)
    return (W @ s).reshape(height, width)


def default_sigma(mean_spacing):
    return 0.7 * mean_spacing


def gaussian_weights(layout: FiberLayout, sigma, width, height, truncate=3.0):
    """Sparse Gaussian kernel weights ``K(d)`` for fibres within ``truncate*sigma``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    radius = truncate * sigma
    rows, cols, vals = [], [], []
    for f, (x, y) in enumerate(layout.centres):
        u0, u1 = max(0, math.ceil(x - radius)), min(width - 1, math.floor(x + radius))
        v0, v1 = max(0, math.ceil(y - radius)), min(height - 1, math.floor(y + radius))
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1]
        d2 = (uu - x) ** 2 + (vv - y) ** 2
        ok = d2 <= radius * radius
        rows.append((vv[ok] * width + uu[ok]).ravel())
        cols.append(np.full(int(ok.sum()), f))
        vals.append(np.exp(-d2[ok] / (2.0 * sigma * sigma)))
    if not rows:
        return sparse.csr_matrix((height * width, len(layout)))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(height * width, len(layout)),
    )


def nw_gaussian_reconstruct(signals, layout: FiberLayout, sigma, width, height, weights=None):
    """Classical Nadaraya-Watson regression with one isotropic Gaussian kernel.

    Pixels with no fibre inside ``3 * sigma`` are set to 0.
    """
    s = np.asarray(signals, dtype=np.float64).ravel()
    if len(s) != len(layout):
        raise ValueError(f"expected {len(layout)} signals, got {len(s)}")
    W = gaussian_weights(layout, sigma, width, height) if weights is None else weights
    num = W @ s
    den = np.asarray(W.sum(axis=1)).ravel()
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out.reshape(height, width)
