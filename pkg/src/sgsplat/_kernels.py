"""Numba kernels for the tile-based accumulated-blending rasterizer.

Every pixel sums its Gaussians in ascending index order, so the forward
pass is bit-identical across thread counts and tile sizes.  The backward
pass writes one gradient record per (tile, Gaussian) pair and reduces the
records serially in tile order.

The exponentials are evaluated by numpy over a flat buffer holding one
sigma per covered (pixel, Gaussian) pair; numba's scalar ``exp`` is several
times slower than numpy's vectorized loop.
"""

import math
import os

# prefer OpenMP: probing an old TBB prints a warning on every import
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

import numba as nb  # noqa: E402

if nb.config.THREADING_LAYER == "default":
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
import numpy as np

TRUNC_SIGMAS = 3.0

_jit = dict(cache=True, nogil=True, fastmath=True)
# no reassociation: identical images must give an exactly zero discrepancy
_jit_strict = dict(cache=True, nogil=True)


@nb.njit(**_jit)
def gaussian_boxes(mu_px, chol, width, height, truncate):
    """Inclusive pixel-index bounding boxes ``(x0, x1, y0, y1)``; empty if x1 < x0."""
    n = mu_px.shape[0]
    boxes = np.empty((n, 4), dtype=np.int64)
    for i in range(n):
        if truncate:
            l1 = chol[i, 0]
            l2 = chol[i, 1]
            l3 = chol[i, 2]
            rx = TRUNC_SIGMAS * abs(l1)
            ry = TRUNC_SIGMAS * math.sqrt(l2 * l2 + l3 * l3)
            # pixel j is covered iff |j + 0.5 - mu| <= r
            # clip in float first so huge radii cannot overflow the int conversion
            x0 = int(math.ceil(min(max(mu_px[i, 0] - rx - 0.5, 0.0), float(width))))
            x1 = int(math.floor(min(max(mu_px[i, 0] + rx - 0.5, -1.0), width - 1.0)))
            y0 = int(math.ceil(min(max(mu_px[i, 1] - ry - 0.5, 0.0), float(height))))
            y1 = int(math.floor(min(max(mu_px[i, 1] + ry - 0.5, -1.0), height - 1.0)))
        else:
            x0 = 0
            y0 = 0
            x1 = width - 1
            y1 = height - 1
        boxes[i, 0] = x0
        boxes[i, 1] = x1
        boxes[i, 2] = y0
        boxes[i, 3] = y1
    return boxes


@nb.njit(**_jit)
def bin_tiles(boxes, width, height, tile):
    """CSR lists of Gaussian indices per tile, ascending within each tile."""
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    ntiles = ntx * nty
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    n = boxes.shape[0]
    for i in range(n):
        if boxes[i, 1] < boxes[i, 0] or boxes[i, 3] < boxes[i, 2]:
            continue
        for ty in range(boxes[i, 2] // tile, boxes[i, 3] // tile + 1):
            for tx in range(boxes[i, 0] // tile, boxes[i, 1] // tile + 1):
                counts[ty * ntx + tx + 1] += 1
    for t in range(ntiles):
        counts[t + 1] += counts[t]
    fill = counts[:-1].copy()
    entries = np.empty(counts[ntiles], dtype=np.int64)
    for i in range(n):
        if boxes[i, 1] < boxes[i, 0] or boxes[i, 3] < boxes[i, 2]:
            continue
        for ty in range(boxes[i, 2] // tile, boxes[i, 3] // tile + 1):
            for tx in range(boxes[i, 0] // tile, boxes[i, 1] // tile + 1):
                t = ty * ntx + tx
                entries[fill[t]] = i
                fill[t] += 1
    return counts, entries


@nb.njit(**_jit)
def pair_offsets(boxes, offsets, entries, width, height, tile):
    """Start of each (tile, Gaussian) entry's pixel block in the flat pair buffer."""
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    starts = np.empty(entries.shape[0] + 1, dtype=np.int64)
    pos = 0
    for t in range(ntiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width) - 1
        ty1 = min(ty0 + tile, height) - 1
        for e in range(offsets[t], offsets[t + 1]):
            i = entries[e]
            nx = min(boxes[i, 1], tx1) - max(boxes[i, 0], tx0) + 1
            ny = min(boxes[i, 3], ty1) - max(boxes[i, 2], ty0) + 1
            starts[e] = pos
            pos += nx * ny
    starts[entries.shape[0]] = pos
    return starts


@nb.njit(parallel=True, **_jit)
def pair_sigmas(mu_px, chol, boxes, offsets, entries, starts, width, height, tile):
    """Mahalanobis half-distance sigma for every covered (pixel, Gaussian) pair."""
    sig = np.empty(starts[-1])
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    for t in nb.prange(ntiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width) - 1
        ty1 = min(ty0 + tile, height) - 1
        for e in range(offsets[t], offsets[t + 1]):
            i = entries[e]
            x0 = max(boxes[i, 0], tx0)
            x1 = min(boxes[i, 1], tx1)
            y0 = max(boxes[i, 2], ty0)
            y1 = min(boxes[i, 3], ty1)
            mx = mu_px[i, 0]
            my = mu_px[i, 1]
            inv1 = 1.0 / chol[i, 0]
            l2 = chol[i, 1]
            inv3 = 1.0 / chol[i, 2]
            k = starts[e]
            for y in range(y0, y1 + 1):
                dy = y + 0.5 - my
                for x in range(x0, x1 + 1):
                    # forward substitution y = L^-1 d
                    a = (x + 0.5 - mx) * inv1
                    b = (dy - l2 * a) * inv3
                    sig[k] = 0.5 * (a * a + b * b)
                    k += 1
    return sig


@nb.njit(parallel=True, **_jit)
def accumulate(color, weights, boxes, offsets, entries, starts, width, height, tile):
    nch = color.shape[1]
    out = np.zeros((height, width, nch))
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    for t in nb.prange(ntiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width) - 1
        ty1 = min(ty0 + tile, height) - 1
        for e in range(offsets[t], offsets[t + 1]):
            i = entries[e]
            x0 = max(boxes[i, 0], tx0)
            x1 = min(boxes[i, 1], tx1)
            y0 = max(boxes[i, 2], ty0)
            y1 = min(boxes[i, 3], ty1)
            k = starts[e]
            for y in range(y0, y1 + 1):
                for x in range(x0, x1 + 1):
                    w = weights[k]
                    k += 1
                    for c in range(nch):
                        out[y, x, c] += color[i, c] * w
    return out


@nb.njit(parallel=True, **_jit)
def backward_tiles(mu_px, chol, color, weights, boxes, offsets, entries, starts, d_out, width, height, tile):
    """Per-entry gradient records: columns dmu_px(2), dchol(3), dcolor(C)."""
    nch = color.shape[1]
    rec = np.zeros((entries.shape[0], 5 + nch))
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    for t in nb.prange(ntiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width) - 1
        ty1 = min(ty0 + tile, height) - 1
        for e in range(offsets[t], offsets[t + 1]):
            i = entries[e]
            x0 = max(boxes[i, 0], tx0)
            x1 = min(boxes[i, 1], tx1)
            y0 = max(boxes[i, 2], ty0)
            y1 = min(boxes[i, 3], ty1)
            mx = mu_px[i, 0]
            my = mu_px[i, 1]
            l2 = chol[i, 1]
            inv1 = 1.0 / chol[i, 0]
            inv3 = 1.0 / chol[i, 2]
            c0 = color[i, 0]
            c1 = color[i, 1 % nch]
            c2 = color[i, 2 % nch]
            gmx = 0.0
            gmy = 0.0
            gl1 = 0.0
            gl2 = 0.0
            gl3 = 0.0
            gc0 = 0.0
            gc1 = 0.0
            gc2 = 0.0
            k = starts[e]
            for y in range(y0, y1 + 1):
                dy = y + 0.5 - my
                for x in range(x0, x1 + 1):
                    w = weights[k]
                    k += 1
                    a = (x + 0.5 - mx) * inv1
                    b = (dy - l2 * a) * inv3
                    if nch == 3:
                        g0 = d_out[y, x, 0]
                        g1 = d_out[y, x, 1]
                        g2 = d_out[y, x, 2]
                        gc0 += w * g0
                        gc1 += w * g1
                        gc2 += w * g2
                        dw = c0 * g0 + c1 * g1 + c2 * g2
                    else:
                        g0 = d_out[y, x, 0]
                        gc0 += w * g0
                        dw = c0 * g0
                    # sigma = (a^2 + b^2) / 2 and dL/dsigma = -w dL/dw
                    ds = -w * dw
                    ga = (a - b * l2 * inv3) * ds
                    gb = b * ds
                    gmx -= ga * inv1
                    gmy -= gb * inv3
                    gl1 -= ga * a * inv1
                    gl2 -= gb * a * inv3
                    gl3 -= gb * b * inv3
            rec[e, 0] = gmx
            rec[e, 1] = gmy
            rec[e, 2] = gl1
            rec[e, 3] = gl2
            rec[e, 4] = gl3
            rec[e, 5] = gc0
            if nch == 3:
                rec[e, 6] = gc1
                rec[e, 7] = gc2
    return rec


@nb.njit(**_jit)
def reduce_records(rec, entries, n):
    grads = np.zeros((n, rec.shape[1]))
    for e in range(entries.shape[0]):
        i = entries[e]
        for k in range(rec.shape[1]):
            grads[i, k] += rec[e, k]
    return grads


@nb.njit(**_jit_strict)
def sobel_loss_grad(recon, gray_w, kx, ky, tgx, tgy, wx, wy):
    """Weighted squared Sobel discrepancy of ``recon`` and its image gradient.

    Replicate padding on both the forward responses and their adjoint.
    Returns ``(sum over pixels, d_image)``; the caller normalizes.
    """
    h, w, c = recon.shape
    gray = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k in range(c):
                acc += recon[i, j, k] * gray_w[k]
            gray[i, j] = acc
    ax = np.empty((h, w))
    ay = np.empty((h, w))
    total = 0.0
    for i in range(h):
        for j in range(w):
            im = max(i - 1, 0)
            ip = min(i + 1, h - 1)
            jm = max(j - 1, 0)
            jp = min(j + 1, w - 1)
            # same evaluation order as imagery.sobel_xy
            rx = ((gray[im, jp] - gray[im, jm]) + 2.0 * (gray[i, jp] - gray[i, jm])
                  + (gray[ip, jp] - gray[ip, jm]))
            ry = ((gray[ip, jm] - gray[im, jm]) + 2.0 * (gray[ip, j] - gray[im, j])
                  + (gray[ip, jp] - gray[im, jp]))
            ex = rx - tgx[i, j]
            ey = ry - tgy[i, j]
            total += wx[i, j] * ex * ex + wy[i, j] * ey * ey
            ax[i, j] = 2.0 * wx[i, j] * ex
            ay[i, j] = 2.0 * wy[i, j] * ey
    plane = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            for dy in range(3):
                ii = min(max(i + dy - 1, 0), h - 1)
                for dx in range(3):
                    jj = min(max(j + dx - 1, 0), w - 1)
                    plane[ii, jj] += kx[dy, dx] * ax[i, j] + ky[dy, dx] * ay[i, j]
    d = np.empty((h, w, c))
    for i in range(h):
        for j in range(w):
            for k in range(c):
                d[i, j, k] = plane[i, j] * gray_w[k]
    return total, d
