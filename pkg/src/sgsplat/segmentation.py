"""SLIC superpixels and per-region gradient-variance ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from skimage.color import rgb2lab

from .exceptions import ContractViolation
from .imagery import GradientField, as_image, sobel, to_grayscale


@dataclass
class SegmentationMap:
    """Per-pixel region labels ``0..R-1`` with member lists."""

    labels: np.ndarray
    region_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self._members = None

    @property
    def shape(self):
        return self.labels.shape

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.region_count)

    def region_pixels(self, region: int) -> np.ndarray:
        """Flat pixel indices (row-major) belonging to ``region``, ascending."""
        if self._members is None:
            flat = self.labels.ravel()
            order = np.argsort(flat, kind="stable")
            bounds = np.concatenate([[0], np.cumsum(self.sizes())])
            self._members = (order, bounds)
        order, bounds = self._members
        return order[bounds[region]:bounds[region + 1]]


def default_region_count(height: int, width: int) -> int:
    return max(64, round(height * width / 1024))


def _grid(height, width, target):
    """Seed grid dimensions: about ``target`` cells of side ``sqrt(HW/target)``."""
    step = math.sqrt(height * width / target)
    nx = max(1, round(width / step))
    ny = max(1, round(height / step))
    while nx * ny < target:
        if width / nx >= height / ny:
            nx += 1
        else:
            ny += 1
    return nx, ny, step


@nb.njit(cache=True)
def _slic_iterate(feat, centers, radius, spatial_weight, iterations):
    h, w, nc = feat.shape
    k = centers.shape[0]
    labels = np.full((h, w), -1, dtype=np.int64)
    dist = np.empty((h, w))
    for _ in range(iterations):
        dist[:] = np.inf
        for j in range(k):
            cx = centers[j, nc]
            cy = centers[j, nc + 1]
            x0 = max(0, int(math.floor(cx - radius)))
            x1 = min(w - 1, int(math.ceil(cx + radius)))
            y0 = max(0, int(math.floor(cy - radius)))
            y1 = min(h - 1, int(math.ceil(cy + radius)))
            for y in range(y0, y1 + 1):
                for x in range(x0, x1 + 1):
                    dc = 0.0
                    for c in range(nc):
                        t = feat[y, x, c] - centers[j, c]
                        dc += t * t
                    sx = x + 0.5 - cx
                    sy = y + 0.5 - cy
                    d = dc + (sx * sx + sy * sy) * spatial_weight
                    # strict comparison: ties keep the lower center index
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = j
        sums = np.zeros((k, nc + 2))
        counts = np.zeros(k)
        for y in range(h):
            for x in range(w):
                j = labels[y, x]
                if j < 0:
                    continue
                for c in range(nc):
                    sums[j, c] += feat[y, x, c]
                sums[j, nc] += x + 0.5
                sums[j, nc + 1] += y + 0.5
                counts[j] += 1.0
        for j in range(k):
            if counts[j] > 0:
                for c in range(nc + 2):
                    centers[j, c] = sums[j, c] / counts[j]
    return labels


@nb.njit(cache=True)
def _nearest_fill(feat, centers, labels, spatial_weight):
    """Assign pixels no search window reached to the globally nearest center."""
    h, w, nc = feat.shape
    for y in range(h):
        for x in range(w):
            if labels[y, x] >= 0:
                continue
            best = np.inf
            for j in range(centers.shape[0]):
                dc = 0.0
                for c in range(nc):
                    t = feat[y, x, c] - centers[j, c]
                    dc += t * t
                sx = x + 0.5 - centers[j, nc]
                sy = y + 0.5 - centers[j, nc + 1]
                d = dc + (sx * sx + sy * sy) * spatial_weight
                if d < best:
                    best = d
                    labels[y, x] = j


@nb.njit(cache=True)
def _components(labels):
    """4-connected components of equal label, numbered in raster order of first pixel."""
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    sizes = np.zeros(h * w, dtype=np.int64)
    n = 0
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            lab = labels[sy, sx]
            comp[sy, sx] = n
            top = 0
            stack[0] = sy * w + sx
            top = 1
            size = 0
            while top > 0:
                top -= 1
                p = stack[top]
                y = p // w
                x = p % w
                size += 1
                for d in range(4):
                    ny = y + (d == 1) - (d == 0)
                    nx = x + (d == 3) - (d == 2)
                    if 0 <= ny < h and 0 <= nx < w and comp[ny, nx] < 0 and labels[ny, nx] == lab:
                        comp[ny, nx] = n
                        stack[top] = ny * w + nx
                        top += 1
            sizes[n] = size
            n += 1
    return comp, sizes[:n]


@nb.njit(cache=True)
def _merge_small(comp, sizes, min_size):
    """Merge components below ``min_size`` into the neighbor sharing the most border."""
    h, w = comp.shape
    n = sizes.shape[0]
    parent = np.arange(n)
    size = sizes.copy()
    # visit components in raster order of their first pixel (== component id)
    first = np.full(n, -1, dtype=np.int64)
    for p in range(h * w):
        c = comp[p // w, p % w]
        if first[c] < 0:
            first[c] = p
    members_start = np.zeros(n + 1, dtype=np.int64)
    for c in range(n):
        members_start[c + 1] = members_start[c] + sizes[c]
    fill = members_start[:-1].copy()
    members = np.empty(h * w, dtype=np.int64)
    for p in range(h * w):
        c = comp[p // w, p % w]
        members[fill[c]] = p
        fill[c] += 1

    def find(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    contact = np.zeros(n, dtype=np.int64)
    for c in range(n):
        if size[find(c)] >= min_size or find(c) != c:
            continue
        touched = []
        for m in range(members_start[c], members_start[c + 1]):
            p = members[m]
            y = p // w
            x = p % w
            for d in range(4):
                ny = y + (d == 1) - (d == 0)
                nx = x + (d == 3) - (d == 2)
                if 0 <= ny < h and 0 <= nx < w:
                    r = find(comp[ny, nx])
                    if r != c:
                        if contact[r] == 0:
                            touched.append(r)
                        contact[r] += 1
        if len(touched) == 0:
            continue
        best = touched[0]
        for r in touched:
            if contact[r] > contact[best] or (contact[r] == contact[best] and r < best):
                best = r
        for r in touched:
            contact[r] = 0
        parent[c] = best
        size[best] += size[c]
    out = np.empty((h, w), dtype=np.int64)
    remap = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for p in range(h * w):
        r = find(comp[p // w, p % w])
        if remap[r] < 0:
            remap[r] = nxt
            nxt += 1
        out[p // w, p % w] = remap[r]
    return out, nxt


def _features(img):
    if img.shape[2] == 3:
        return np.ascontiguousarray(rgb2lab(np.clip(img, 0.0, 1.0)))
    # intensity on the same 0..100 scale as CIELAB lightness
    return np.ascontiguousarray(img * 100.0)


def slic_segment(img, target_regions=None, compactness=10.0, iterations=10, seed=0) -> SegmentationMap:
    """SLIC superpixels with a 4-connectivity enforcement pass.

    Seeds sit on a regular grid of spacing ``S = sqrt(HW / target_regions)``
    and move to the lowest-gradient pixel of their 3x3 neighbourhood. Each
    k-means pass compares a pixel only with seeds within ``S`` of it.
    Components smaller than ``S**2 / 4`` are merged into the neighbour with
    which they share the longest border.

    ``seed`` is accepted for interface stability; the procedure itself
    draws no random numbers.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    if target_regions is None:
        target_regions = default_region_count(h, w)
    target_regions = int(target_regions)
    if target_regions > h * w:
        raise ContractViolation(f"target_regions={target_regions} exceeds pixel count {h * w}")
    if target_regions < 1:
        raise ContractViolation("target_regions must be positive")
    feat = _features(img)
    nx, ny, step = _grid(h, w, target_regions)
    sx, sy = w / nx, h / ny
    xs = (np.arange(nx) + 0.5) * sx
    ys = (np.arange(ny) + 0.5) * sy
    cx, cy = np.meshgrid(xs, ys)
    cx = cx.ravel()
    cy = cy.ravel()

    if step >= 3 and min(h, w) >= 3:
        mag = sobel(to_grayscale(img)).magnitude
        for j in range(cx.size):
            px = min(int(cx[j]), w - 1)
            py = min(int(cy[j]), h - 1)
            best = mag[py, px]
            bx, by = px, py
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    qy, qx = py + dy, px + dx
                    if 0 <= qy < h and 0 <= qx < w and mag[qy, qx] < best:
                        best = mag[qy, qx]
                        bx, by = qx, qy
            if (bx, by) != (px, py):
                cx[j] = bx + 0.5
                cy[j] = by + 0.5

    seeds_px = np.clip(cy.astype(int), 0, h - 1), np.clip(cx.astype(int), 0, w - 1)
    centers = np.column_stack([feat[seeds_px], cx, cy]).astype(np.float64)
    radius = max(step, sx, sy)
    spatial_weight = (compactness / step) ** 2
    labels = _slic_iterate(feat, centers, radius, spatial_weight, int(iterations))
    _nearest_fill(feat, centers, labels, spatial_weight)
    comp, sizes = _components(labels)
    min_size = 0.25 * step * step
    merged, count = _merge_small(comp, sizes, min_size)
    return SegmentationMap(merged, int(count))


def region_variances(seg: SegmentationMap, grad: GradientField) -> list[tuple[int, float]]:
    """Population variance of gradient magnitude per region, most complex first.

    Ties are broken by ascending region id.
    """
    mag = np.asarray(grad.magnitude if isinstance(grad, GradientField) else grad, dtype=np.float64)
    if mag.shape != seg.shape:
        raise ContractViolation(f"gradient shape {mag.shape} != label shape {seg.shape}")
    lab = seg.labels.ravel()
    m = mag.ravel()
    counts = np.bincount(lab, minlength=seg.region_count).astype(np.float64)
    mean = np.bincount(lab, weights=m, minlength=seg.region_count) / counts
    dev = m - mean[lab]
    var = np.bincount(lab, weights=dev * dev, minlength=seg.region_count) / counts
    order = np.lexsort((np.arange(seg.region_count), -var))
    return [(int(r), float(var[r])) for r in order]
