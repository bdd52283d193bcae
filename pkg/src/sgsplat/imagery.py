"""Image I/O, grayscale conversion, Sobel gradients and CSV output.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}`` and intensities in ``[0, 1]``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .exceptions import ContractViolation, ImageFormatError

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class GradientField:
    """Horizontal/vertical Sobel responses and their magnitude, each ``(H, W)``."""

    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray

    @property
    def shape(self):
        return self.gx.shape


def as_image(arr) -> np.ndarray:
    """Return ``arr`` as a float64 ``(H, W, C)`` array; 2-D input gains a channel axis."""
    img = np.asarray(arr)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ContractViolation(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64, copy=False)


def load_image(path) -> np.ndarray:
    """Load an 8-bit grayscale or RGB PNG as a unit-normalized float image."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode not in ("L", "RGB"):
                raise ImageFormatError(
                    f"{path}: unsupported mode {mode!r}; need 8-bit L or RGB"
                )
            data = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return as_image(data)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to ``[0, 1]`` and quantize to 8-bit (round half to even)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img) -> None:
    img = as_image(img)
    data = to_uint8(img)
    if data.shape[2] == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma. Single-channel input is returned unchanged."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img
    return (img @ GRAY_WEIGHTS)[:, :, None]


def _plane(gray) -> np.ndarray:
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3:
        if g.shape[2] != 1:
            raise ContractViolation("sobel expects a single-channel image")
        g = g[:, :, 0]
    if g.ndim != 2:
        raise ContractViolation(f"sobel expects a 2-D plane, got shape {g.shape}")
    return g


def sobel_xy(gray) -> tuple[np.ndarray, np.ndarray]:
    """Raw Sobel responses (correlation, replicate padding).

    Evaluated as central differences smoothed by ``(1, 2, 1)``, so constant
    planes give exact zeros and ``sobel_xy(g.T)`` is the exact transpose.
    """
    g = _plane(gray)
    p = np.pad(g, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


def sobel_adjoint(d_gx: np.ndarray, d_gy: np.ndarray) -> np.ndarray:
    """Transpose of :func:`sobel_xy`: maps output-plane gradients back to the input plane."""
    h, w = d_gx.shape
    p = np.zeros((h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            if SOBEL_X[ky, kx] or SOBEL_Y[ky, kx]:
                p[ky:ky + h, kx:kx + w] += SOBEL_X[ky, kx] * d_gx + SOBEL_Y[ky, kx] * d_gy
    # fold the replicated border back onto the edge pixels
    p[1] += p[0]
    p[-2] += p[-1]
    p[1:-1, 1] += p[1:-1, 0]
    p[1:-1, -2] += p[1:-1, -1]
    return p[1:-1, 1:-1]


def sobel(gray) -> GradientField:
    """Sobel gradient field of a single-channel image.

    Raises:
        ContractViolation: for multi-channel input or planes smaller than 3x3.
    """
    g = _plane(gray)
    if min(g.shape) < 3:
        raise ContractViolation("sobel needs width and height >= 3")
    gx, gy = sobel_xy(g)
    return GradientField(gx, gy, np.hypot(gx, gy))


def write_csv(path, header, rows) -> None:
    """Write rows with ``%.6f`` floats, plain ints and LF line endings."""

    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            if math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return "%.6f" % v
        return str(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
