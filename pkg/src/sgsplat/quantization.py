"""Learned scale / adaptive bitwidth quantization and residual vector quantization.

All rounding is round-half-to-even (``numpy.rint``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np

from .exceptions import ContractViolation
from .splat import EPS_SCALE, GaussianScene, SceneGradients

LN2 = math.log(2.0)

# 16-bit fixed point for codebook entries: [-4, 4) with step 2**-13
CODEBOOK_FRAC_BITS = 13
CODEBOOK_OFFSET = 4.0
CODEBOOK_STEP = 2.0 ** -CODEBOOK_FRAC_BITS


@dataclass
class LsqParams:
    """Range and bitwidth of one uniform quantizer.

    ``b`` is the soft bitwidth; the quantizer runs at ``round(b)`` bits.
    """

    v_min: float
    v_max: float
    b: float

    def __post_init__(self):
        if not self.v_max > self.v_min:
            raise ContractViolation(f"v_max ({self.v_max}) must exceed v_min ({self.v_min})")

    @property
    def bits(self) -> int:
        return int(np.rint(self.b))


def hard_bits(b):
    return np.rint(b).astype(np.int64)


def _check_bits(bits):
    bits = np.asarray(bits)
    if np.any(bits < 1) or np.any(bits > 30):
        raise ContractViolation("bitwidth must lie in [1, 30]")
    return bits


def quantize_codes(v, v_min, v_max, bits):
    """Integer codes ``clamp(round((v - v_min) / s), 0, 2**B - 1)`` (vectorized)."""
    bits = _check_bits(bits)
    q = np.exp2(bits.astype(np.float64)) - 1.0
    s = (np.asarray(v_max, dtype=np.float64) - v_min) / q
    code = np.clip(np.rint((np.asarray(v, dtype=np.float64) - v_min) / s), 0.0, q)
    return code.astype(np.int64)


def dequantize_codes(code, v_min, v_max, bits):
    bits = _check_bits(bits)
    q = np.exp2(bits.astype(np.float64)) - 1.0
    s = (np.asarray(v_max, dtype=np.float64) - v_min) / q
    return s * code + v_min


def lsq_forward(v, p: LsqParams):
    """Quantize one value. Returns ``(code, dequantized value)``."""
    code = quantize_codes(v, p.v_min, p.v_max, p.bits)
    return int(code), float(dequantize_codes(code, p.v_min, p.v_max, p.bits))


def lsq_grads(v, v_min, v_max, bits):
    """Straight-through partials of the dequantized value (vectorized).

    Returns ``(d/dv_max, d/dv_min, d/db, d/dv)``. Rounding is treated as the
    identity; a value outside ``[v_min, v_max]`` is pinned by the clamp, so
    its ``d/dv`` is 0.
    """
    bits = _check_bits(bits)
    v = np.asarray(v, dtype=np.float64)
    v_min = np.asarray(v_min, dtype=np.float64)
    v_max = np.asarray(v_max, dtype=np.float64)
    pow2 = np.exp2(bits.astype(np.float64))
    q = pow2 - 1.0
    s = (v_max - v_min) / q
    code = np.clip(np.rint((v - v_min) / s), 0.0, q)
    inside = (v >= v_min) & (v <= v_max)
    rel = (v - v_min) / (s * q)
    d_vmax = np.where(inside, code / q - rel, code / q)
    d_vmin = np.where(inside, -code / q + rel, 1.0 - code / q)
    dbits = pow2 * LN2 / q
    # d s / d b = -s * 2^B ln2 / Q; inside the range the rounding residual remains
    d_b = np.where(inside, dbits * (v - v_min - s * code), dbits * (-s * code))
    d_v = inside.astype(np.float64)
    return d_vmax, d_vmin, d_b, d_v


def lsq_backward(v, p: LsqParams):
    return tuple(float(x) for x in lsq_grads(v, p.v_min, p.v_max, p.bits))


def bitwidth_loss(b):
    """Mean hard bitwidth and its straight-through gradient ``1/N`` per entry."""
    b = np.asarray([x.b if isinstance(x, LsqParams) else x for x in np.atleast_1d(b)], dtype=np.float64)
    if b.size == 0:
        raise ContractViolation("bitwidth_loss needs at least one bitwidth")
    return float(np.mean(np.rint(b))), np.full(b.shape, 1.0 / b.size)


# ---------------------------------------------------------------------------
# residual vector quantization


@dataclass
class RvqCodebook:
    """``stages`` is an ``(S, K, C)`` array of centroids."""

    stages: np.ndarray

    def __post_init__(self):
        self.stages = np.asarray(self.stages, dtype=np.float64)
        if self.stages.ndim != 3:
            raise ContractViolation("codebook must be (stages, K, channels)")

    @property
    def n_stages(self):
        return self.stages.shape[0]

    @property
    def size(self):
        return self.stages.shape[1]

    def copy(self):
        return RvqCodebook(self.stages.copy())


@nb.njit(cache=True)
def _nearest(x, centroids):
    n, c = x.shape
    k = centroids.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        arg = 0
        for j in range(k):
            d = 0.0
            for ch in range(c):
                t = x[i, ch] - centroids[j, ch]
                d += t * t
            if d < best:
                best = d
                arg = j
        out[i] = arg
    return out


def nearest(x, centroids):
    """Index of the nearest centroid per row; ties resolve to the lowest index."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _nearest(x, np.ascontiguousarray(centroids, dtype=np.float64))


def kmeans(x, k, iterations=10, rng=None):
    """Lloyd's algorithm with k-means++ seeding. Empty clusters keep their centroid."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = centers[0]
            break
        idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
        centers[j] = x[min(idx, n - 1)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(1))
    for _ in range(iterations):
        assign = nearest(x, centers)
        counts = np.bincount(assign, minlength=k)
        # means taken relative to one member, so identical members stay exact
        ref = np.zeros_like(centers)
        ref[assign[::-1]] = x[::-1]
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x - ref[assign])
        nz = counts > 0
        new = centers.copy()
        new[nz] = ref[nz] + sums[nz] / counts[nz, None]
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def to_fixed_point(values):
    """Round codebook values onto the 16-bit fixed-point grid."""
    code = np.clip(np.rint((np.asarray(values) + CODEBOOK_OFFSET) / CODEBOOK_STEP), 0, 65535)
    return code * CODEBOOK_STEP - CODEBOOK_OFFSET


def rvq_fit(colors, stages=2, k=256, iterations=10, seed=0) -> RvqCodebook:
    """Stage-wise k-means on running residuals; deterministic given ``seed``."""
    colors = np.asarray(colors, dtype=np.float64)
    if colors.ndim != 2 or colors.shape[0] == 0:
        raise ContractViolation("rvq_fit needs a non-empty (N, C) color array")
    rng = np.random.default_rng(seed)
    residual = colors.copy()
    books = []
    for _ in range(stages):
        c = kmeans(residual, k, iterations, rng)
        books.append(c)
        residual = residual - c[nearest(residual, c)]
    return RvqCodebook(np.stack(books))


def rvq_encode(colors, book: RvqCodebook):
    """Greedy per-stage nearest-centroid coding of the running residual.

    Returns ``(indices (S, N), quantized colors, residual loss)`` where the
    loss is the mean squared difference between quantized and input colors.
    """
    colors = np.asarray(colors, dtype=np.float64)
    residual = colors.copy()
    idx = np.empty((book.n_stages, colors.shape[0]), dtype=np.int64)
    for s in range(book.n_stages):
        idx[s] = nearest(residual, book.stages[s])
        residual = residual - book.stages[s][idx[s]]
    quant = rvq_decode(idx, book)
    err = quant - colors
    return idx, quant, float(np.mean(err * err)) if colors.size else 0.0


def rvq_decode(indices, book: RvqCodebook):
    indices = np.asarray(indices)
    out = np.zeros((indices.shape[1], book.stages.shape[2]))
    for s in range(book.n_stages):
        out += book.stages[s][indices[s]]
    return out


# ---------------------------------------------------------------------------
# whole-scene quantization


@dataclass
class QuantConfig:
    bit_range: tuple[int, int] = (6, 16)
    init_bits: float = 8.0
    pos_bits: int = 12
    rvq_stages: int = 2
    rvq_k: int = 256
    rvq_iterations: int = 10
    # covariance ranges start at these percentiles so a few outliers do not set the step
    range_percentile: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.bit_range
        if not 1 <= lo <= hi <= 16:
            raise ContractViolation(f"bit range {self.bit_range} must satisfy 1 <= lo <= hi <= 16")
        if not 1 <= self.pos_bits <= 30:
            raise ContractViolation("pos_bits must lie in [1, 30]")
        if self.rvq_k < 1 or self.rvq_k & (self.rvq_k - 1):
            raise ContractViolation("rvq_k must be a power of two")
        if self.rvq_stages < 1:
            raise ContractViolation("rvq_stages must be >= 1")
        if not 0.0 <= self.range_percentile < 50.0:
            raise ContractViolation("range_percentile must lie in [0, 50)")


@dataclass
class QuantState:
    """Learnable quantizer parameters used during fine-tuning.

    Covariance ranges are shared across the scene per Cholesky entry
    (``cov_min``/``cov_max`` have shape ``(3,)``); each Gaussian has its own
    soft bitwidth ``b``.
    """

    cov_min: np.ndarray
    cov_max: np.ndarray
    b: np.ndarray
    codebook: RvqCodebook
    bit_range: tuple[int, int] = (6, 16)
    pos_bits: int = 12
    pos_range: tuple[float, float] = (-1.0, 1.0)

    def copy(self):
        return replace(self, cov_min=self.cov_min.copy(), cov_max=self.cov_max.copy(),
                       b=self.b.copy(), codebook=self.codebook.copy())

    def project(self):
        lo, hi = self.bit_range
        np.clip(self.b, lo, hi, out=self.b)
        # keep l1, l3 reconstructions strictly positive
        self.cov_min[0] = max(self.cov_min[0], EPS_SCALE)
        self.cov_min[2] = max(self.cov_min[2], EPS_SCALE)
        gap = 1e-6
        self.cov_max[:] = np.maximum(self.cov_max, self.cov_min + gap)
        self.codebook.stages[:] = np.clip(self.codebook.stages, -CODEBOOK_OFFSET,
                                          CODEBOOK_OFFSET - CODEBOOK_STEP)

    @property
    def hard_bits(self):
        return hard_bits(self.b)

    def serial_ranges(self):
        """Covariance ranges rounded to float32, as the bitstream stores them."""
        cov_min = _f32(self.cov_min)
        cov_max = np.maximum(_f32(self.cov_max), _f32(cov_min + 1e-5 * np.maximum(1.0, np.abs(cov_min))))
        return cov_min, cov_max

    def serial_codebook(self) -> RvqCodebook:
        return RvqCodebook(to_fixed_point(self.codebook.stages))


def init_state(scene: GaussianScene, cfg: QuantConfig = QuantConfig()) -> QuantState:
    """Ranges from percentiles of the current parameters, uniform soft bitwidth, fitted RVQ."""
    n = len(scene)
    if n:
        cmin = np.percentile(scene.chol, cfg.range_percentile, axis=0)
        cmax = np.percentile(scene.chol, 100.0 - cfg.range_percentile, axis=0)
    else:
        cmin = np.array([EPS_SCALE, -1.0, EPS_SCALE])
        cmax = cmin + 1.0
    cmax = np.maximum(cmax, cmin + 1e-6)
    lo, hi = cfg.bit_range
    b = np.full(n, float(np.clip(cfg.init_bits, lo, hi)))
    if n:
        book = rvq_fit(scene.color, cfg.rvq_stages, cfg.rvq_k, cfg.rvq_iterations, cfg.seed)
    else:
        book = RvqCodebook(np.zeros((cfg.rvq_stages, cfg.rvq_k, scene.channels)))
    book.stages[:] = to_fixed_point(book.stages)
    st = QuantState(cmin, cmax, b, book, tuple(cfg.bit_range), cfg.pos_bits)
    st.project()
    return st


@dataclass
class QuantizedScene:
    """Everything the bitstream stores, plus the soft bitwidths for reference.

    Dequantized values are produced by :meth:`dequantize`; the container
    holds codes and float32-representable ranges so decode is bit-exact.
    """

    width: int
    height: int
    pos_bits: int
    pos_range: tuple[float, float]
    pos_codes: np.ndarray          # (N, 2)
    cov_min: np.ndarray            # (3,)
    cov_max: np.ndarray            # (3,)
    cov_bits: np.ndarray           # (N,)
    cov_codes: np.ndarray          # (N, 3)
    codebook: RvqCodebook
    color_indices: np.ndarray      # (S, N)
    bit_range: tuple[int, int] = (6, 16)
    soft_bits: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return self.pos_codes.shape[0]

    @property
    def channels(self):
        return self.codebook.stages.shape[2]

    def dequantize(self) -> GaussianScene:
        n = len(self)
        if n == 0:
            return GaussianScene.empty(self.width, self.height, self.channels)
        lo, hi = self.pos_range
        mu = dequantize_codes(self.pos_codes, lo, hi, np.full((n, 2), self.pos_bits))
        bits = np.repeat(self.cov_bits[:, None], 3, axis=1)
        chol = dequantize_codes(self.cov_codes, self.cov_min[None, :], self.cov_max[None, :], bits)
        color = rvq_decode(self.color_indices, self.codebook)
        return GaussianScene(mu, chol, color, self.width, self.height)

    def mean_bits(self) -> float:
        return float(np.mean(self.cov_bits)) if len(self) else 0.0


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class QuantCache:
    """Intermediates of :func:`quantize_scene` needed by its backward pass."""

    chol: np.ndarray
    bits: np.ndarray
    color: np.ndarray
    quant_color: np.ndarray
    indices: np.ndarray
    cov_min: np.ndarray
    cov_max: np.ndarray


def quantize_scene(scene: GaussianScene, state: QuantState):
    """Fake-quantize a scene with the current quantizer state.

    Returns ``(dequantized scene, bitwidth loss, residual loss, cache)``.
    """
    n = len(scene)
    if n == 0:
        return scene.copy(), 0.0, 0.0, None
    lo, hi = state.pos_range
    pos_bits = np.full((n, 2), state.pos_bits)
    mu = dequantize_codes(quantize_codes(scene.mu, lo, hi, pos_bits), lo, hi, pos_bits)
    bits = np.repeat(state.hard_bits[:, None], 3, axis=1)
    cmin, cmax = state.serial_ranges()
    cmin = cmin[None, :]
    cmax = cmax[None, :]
    chol = dequantize_codes(quantize_codes(scene.chol, cmin, cmax, bits), cmin, cmax, bits)
    idx, qcolor, l_r = rvq_encode(scene.color, state.serial_codebook())
    deq = GaussianScene(mu, chol, qcolor, scene.width, scene.height)
    l_b, _ = bitwidth_loss(state.b)
    cache = QuantCache(scene.chol.copy(), bits, scene.color.copy(), qcolor, idx, cmin[0], cmax[0])
    return deq, l_b, l_r, cache


@dataclass
class StateGradients:
    d_cov_min: np.ndarray
    d_cov_max: np.ndarray
    d_b: np.ndarray
    d_codebook: np.ndarray


def quantize_backward(state: QuantState, cache: QuantCache, g: SceneGradients,
                      lambda_b=0.0, lambda_r=0.0):
    """Chain renderer gradients through the quantizers.

    Returns ``(SceneGradients for the raw scene, StateGradients)``. Positions
    pass straight through; covariance entries use the straight-through LSQ
    partials; colors receive the rendered-color gradient unchanged (straight
    through) plus the residual-loss term, and every selected codebook entry
    accumulates both.
    """
    n = cache.chol.shape[0]
    cmin = np.broadcast_to(cache.cov_min, (n, 3))
    cmax = np.broadcast_to(cache.cov_max, (n, 3))
    d_vmax, d_vmin, d_b, d_v = lsq_grads(cache.chol, cmin, cmax, cache.bits)
    up = g.d_chol
    d_chol = up * d_v
    d_cov_max = (up * d_vmax).sum(axis=0)
    d_cov_min = (up * d_vmin).sum(axis=0)
    d_bits = (up * d_b).sum(axis=1) + lambda_b / n

    diff = cache.quant_color - cache.color
    d_res = diff * (2.0 * lambda_r / diff.size)
    d_quant = g.d_color + d_res
    d_color = g.d_color - d_res
    s, k, c = state.codebook.stages.shape
    d_book = np.zeros((s, k, c))
    for st in range(s):
        for ch in range(c):
            d_book[st, :, ch] = np.bincount(cache.indices[st], weights=d_quant[:, ch], minlength=k)
    return (SceneGradients(g.d_mu.copy(), d_chol, d_color),
            StateGradients(d_cov_min, d_cov_max, d_bits, d_book))


def freeze(scene: GaussianScene, state: QuantState) -> QuantizedScene:
    """Snap the scene onto integer codes with serializable (float32) ranges.

    Gaussians come back sorted by hard bitwidth, which is the order the
    container stores and decodes them in.
    """
    n = len(scene)
    lo, hi = state.pos_range
    cov_min, cov_max = state.serial_ranges()
    book = state.serial_codebook()
    bits = np.clip(state.hard_bits, *state.bit_range)
    if n:
        pos_codes = quantize_codes(scene.mu, lo, hi, np.full((n, 2), state.pos_bits))
        cov_codes = quantize_codes(scene.chol, cov_min[None, :], cov_max[None, :],
                                   np.repeat(bits[:, None], 3, axis=1))
        idx, _, _ = rvq_encode(scene.color, book)
    else:
        pos_codes = np.zeros((0, 2), dtype=np.int64)
        cov_codes = np.zeros((0, 3), dtype=np.int64)
        idx = np.zeros((book.n_stages, 0), dtype=np.int64)
    # group order (ascending bitwidth, stable) so the container needs no permutation
    order = np.argsort(bits, kind="stable")
    return QuantizedScene(scene.width, scene.height, state.pos_bits, (float(lo), float(hi)),
                          pos_codes[order], cov_min, cov_max, bits[order].astype(np.int64),
                          cov_codes[order], book, idx[:, order], tuple(state.bit_range),
                          state.b[order].copy())
