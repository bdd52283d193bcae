"""The ``.gs2c`` container: fixed-width code packing with bitwidth groups.

Layout (all multi-byte fields little-endian, every section byte-aligned)::

    header       magic "GS2C", version u8, width u32, height u32,
                 gaussian_count u32, group_count u8, low bitwidth u8,
                 position bits u8, RVQ stages u8, log2(K) u8, channels u8
    group table  member count for each bitwidth slot except the last, each
                 ``bit_length(N)`` bits wide, MSB-first (the last is implied)
    ranges       position min/max, covariance min[3], covariance max[3] (f32)
    codebooks    S x K x C unsigned 16-bit fixed point
    positions    N x 2 codes, MSB-first
    covariance   group-major, 3 codes of B bits per Gaussian, MSB-first
    colors       stage-major RVQ indices of log2(K) bits, MSB-first

Sections after the header are omitted for an empty scene. Version 2 of the
same container stores an unquantized scene as float32 records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CorruptionError, ImageFormatError, SplatError
from .quantization import (
    CODEBOOK_OFFSET,
    CODEBOOK_STEP,
    QuantizedScene,
    RvqCodebook,
)
from .splat import GaussianScene

MAGIC = b"GS2C"
VERSION_QUANTIZED = 1
VERSION_SCENE = 2

_HEADER = struct.Struct("<4sBIIIBBBBBB")
_SCENE_HEADER = struct.Struct("<4sBIIIB")


@dataclass
class Bitstream:
    """Encoded bytes plus the ``(offset, length)`` of each section."""

    data: bytes
    sections: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.data)

    @property
    def bits(self) -> int:
        return 8 * len(self.data)

    def section_bytes(self, name) -> int:
        return self.sections.get(name, (0, 0))[1]


def count_width(n: int) -> int:
    return max(1, int(n).bit_length())


def pack_codes(codes, widths) -> bytes:
    """Pack non-negative integers MSB-first, each with its own bit width."""
    codes = np.asarray(codes, dtype=np.int64).ravel()
    widths = np.broadcast_to(np.asarray(widths, dtype=np.int64), codes.shape)
    if codes.size == 0:
        return b""
    if np.any(codes < 0) or np.any(codes >> widths):
        raise SplatError("code exceeds its field width (invariant breach)")
    # one row per code, left-padded to the widest field; padding is dropped
    maxw = int(widths.max())
    shifts = np.arange(maxw - 1, -1, -1)
    bits = (codes[:, None] >> shifts[None, :]) & 1
    keep = shifts[None, :] < widths[:, None]
    return np.packbits(bits[keep].astype(np.uint8)).tobytes()


def unpack_codes(buf: bytes, widths) -> np.ndarray:
    widths = np.asarray(widths, dtype=np.int64).ravel()
    if widths.size == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))
    maxw = int(widths.max())
    shifts = np.arange(maxw - 1, -1, -1)
    keep = shifts[None, :] < widths[:, None]
    mat = np.zeros(keep.shape, dtype=np.int64)
    mat[keep] = bits[: int(widths.sum())]
    return (mat << shifts[None, :]).sum(axis=1)


def canonical_order(q: QuantizedScene) -> np.ndarray:
    """Stable ascending-bitwidth permutation used by the container."""
    return np.argsort(q.cov_bits, kind="stable")


def canonicalize(q: QuantizedScene) -> QuantizedScene:
    """Reorder Gaussians into group order; a no-op for already sorted scenes."""
    order = canonical_order(q)
    return QuantizedScene(
        q.width, q.height, q.pos_bits, q.pos_range, q.pos_codes[order],
        q.cov_min, q.cov_max, q.cov_bits[order], q.cov_codes[order], q.codebook,
        q.color_indices[:, order], q.bit_range,
        None if q.soft_bits is None else q.soft_bits[order],
    )


def _log2k(k: int) -> int:
    if k < 1 or k & (k - 1):
        raise SplatError(f"codebook size {k} is not a power of two")
    return k.bit_length() - 1


def encode(q: QuantizedScene) -> Bitstream:
    """Serialize a quantized scene. Output is deterministic for identical input."""
    q = canonicalize(q)
    n = len(q)
    lo, hi = q.bit_range
    slots = hi - lo + 1
    s, k, c = q.codebook.stages.shape
    parts = []
    sections = {}
    pos = 0

    def add(name, blob):
        nonlocal pos
        sections[name] = (pos, len(blob))
        parts.append(blob)
        pos += len(blob)

    add("header", _HEADER.pack(MAGIC, VERSION_QUANTIZED, q.width, q.height, n,
                               slots, lo, q.pos_bits, s, _log2k(k), c))
    if n:
        if np.any(q.cov_bits < lo) or np.any(q.cov_bits > hi):
            raise SplatError("bitwidth outside the declared range (invariant breach)")
        counts = np.bincount(q.cov_bits - lo, minlength=slots)
        add("groups", pack_codes(counts[:-1], count_width(n)))
        ranges = np.concatenate([q.pos_range, q.cov_min, q.cov_max]).astype("<f4")
        add("ranges", ranges.tobytes())
        book = np.rint((q.codebook.stages + CODEBOOK_OFFSET) / CODEBOOK_STEP)
        if book.min() < 0 or book.max() > 65535:
            raise SplatError("codebook entry outside fixed-point range (invariant breach)")
        add("codebooks", book.astype("<u2").tobytes())
        add("positions", pack_codes(q.pos_codes, q.pos_bits))
        add("covariance", pack_codes(q.cov_codes, np.repeat(q.cov_bits, 3)))
        add("colors", pack_codes(q.color_indices, _log2k(k)))
    return Bitstream(b"".join(parts), sections)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, nbytes, section):
        if self.pos + nbytes > len(self.data):
            raise CorruptionError(
                f"truncated stream in section '{section}' at byte {self.pos}: "
                f"need {nbytes} bytes, {len(self.data) - self.pos} left",
                offset=self.pos, section=section)
        out = self.data[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out


def _check_magic(data, min_len):
    if len(data) < 4 or data[:4] != MAGIC:
        raise ImageFormatError("bad magic: not a GS2C stream")
    if len(data) < min_len:
        raise CorruptionError("truncated header", offset=len(data), section="header")


def decode(bs) -> tuple[QuantizedScene, GaussianScene]:
    """Parse a stream back into its quantized scene and the dequantized scene."""
    data = bs.data if isinstance(bs, Bitstream) else bytes(bs)
    _check_magic(data, 5)
    if data[4] != VERSION_QUANTIZED:
        raise ImageFormatError(f"unsupported GS2C version {data[4]}")
    r = _Reader(data)
    (_, _, width, height, n, slots, lo, pos_bits, s, log2k, c) = _HEADER.unpack(r.take(_HEADER.size, "header"))
    k = 1 << log2k
    hi = lo + slots - 1
    if slots < 1 or lo < 1 or hi > 16 or c not in (1, 3) or not 1 <= pos_bits <= 30:
        raise CorruptionError("inconsistent header fields", offset=0, section="header")
    if n == 0:
        book = RvqCodebook(np.zeros((s, k, c)))
        q = QuantizedScene(width, height, pos_bits, (-1.0, 1.0), np.zeros((0, 2), np.int64),
                           np.zeros(3), np.ones(3), np.zeros(0, np.int64), np.zeros((0, 3), np.int64),
                           book, np.zeros((s, 0), np.int64), (lo, hi))
        return q, q.dequantize()
    w = count_width(n)
    nbytes = (w * (slots - 1) + 7) // 8
    counts = list(unpack_codes(r.take(nbytes, "groups"), np.full(slots - 1, w)))
    counts.append(n - sum(counts))
    if counts[-1] < 0:
        raise CorruptionError("group counts exceed gaussian_count", offset=r.pos, section="groups")
    ranges = np.frombuffer(r.take(32, "ranges"), dtype="<f4").astype(np.float64)
    raw = np.frombuffer(r.take(2 * s * k * c, "codebooks"), dtype="<u2")
    book = RvqCodebook(raw.reshape(s, k, c).astype(np.float64) * CODEBOOK_STEP - CODEBOOK_OFFSET)
    pos_codes = unpack_codes(r.take((2 * n * pos_bits + 7) // 8, "positions"),
                             np.full(2 * n, pos_bits)).reshape(n, 2)
    bits = np.repeat(np.arange(lo, hi + 1), counts)
    cov_w = np.repeat(bits, 3)
    cov_codes = unpack_codes(r.take((int(cov_w.sum()) + 7) // 8, "covariance"), cov_w).reshape(n, 3)
    idx = unpack_codes(r.take((s * n * log2k + 7) // 8, "colors"),
                       np.full(s * n, log2k)).reshape(s, n)
    if r.pos != len(data):
        raise CorruptionError("trailing bytes after color section", offset=r.pos, section="colors")
    q = QuantizedScene(width, height, pos_bits, (ranges[0], ranges[1]), pos_codes,
                       ranges[2:5], ranges[5:8], bits.astype(np.int64), cov_codes, book, idx, (lo, hi))
    return q, q.dequantize()


def payload_bits(q: QuantizedScene) -> int:
    """Code payload size: sum of group widths plus position and color index bits."""
    n = len(q)
    s, k, _ = q.codebook.stages.shape
    return int(3 * q.cov_bits.sum() + 2 * n * q.pos_bits + n * s * _log2k(k))


def bpp(bs, width: int, height: int) -> float:
    nbytes = len(bs.data) if isinstance(bs, Bitstream) else len(bs)
    return 8.0 * nbytes / (width * height)


def write_stream(path, bs: Bitstream) -> None:
    with open(path, "wb") as fh:
        fh.write(bs.data)


def read_stream(path) -> Bitstream:
    with open(path, "rb") as fh:
        return Bitstream(fh.read())


# ---------------------------------------------------------------------------
# float32 scene files shared between ``fit`` and ``encode``


def scene_to_bytes(scene: GaussianScene) -> bytes:
    n = len(scene)
    head = _SCENE_HEADER.pack(MAGIC, VERSION_SCENE, scene.width, scene.height, n, scene.channels)
    body = np.hstack([scene.mu, scene.chol, scene.color]).astype("<f4") if n else np.zeros(0, "<f4")
    return head + body.tobytes()


def scene_from_bytes(data: bytes) -> GaussianScene:
    _check_magic(data, 5)
    if data[4] != VERSION_SCENE:
        raise ImageFormatError(f"not a scene file (version {data[4]})")
    r = _Reader(data)
    _, _, width, height, n, c = _SCENE_HEADER.unpack(r.take(_SCENE_HEADER.size, "header"))
    rec = 5 + c
    body = np.frombuffer(r.take(4 * rec * n, "gaussians"), dtype="<f4").astype(np.float64).reshape(n, rec)
    if r.pos != len(data):
        raise CorruptionError("trailing bytes after scene records", offset=r.pos, section="gaussians")
    return GaussianScene(body[:, 0:2], body[:, 2:5], body[:, 5:], width, height)


def save_scene(path, scene: GaussianScene) -> None:
    with open(path, "wb") as fh:
        fh.write(scene_to_bytes(scene))


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as fh:
        return scene_from_bytes(fh.read())
