"""2D Gaussian scene model and the differentiable accumulated-blending rasterizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .exceptions import ContractViolation

EPS_SCALE = 1e-3
TILE_SIZE = 16


@dataclass(frozen=True)
class Gaussian2D:
    """One Gaussian: normalized position, Cholesky factor (pixels) and color."""

    mu: tuple[float, float]
    chol: tuple[float, float, float]
    color: tuple[float, ...]


@dataclass
class GaussianScene:
    """Ordered set of Gaussians stored as parallel arrays.

    ``mu`` is ``(N, 2)`` in ``[-1, 1]`` (x, y), ``chol`` is ``(N, 3)`` holding
    ``(l1, l2, l3)`` in pixel units and ``color`` is ``(N, C)``.
    """

    mu: np.ndarray
    chol: np.ndarray
    color: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64).reshape(-1, 2)
        self.chol = np.ascontiguousarray(self.chol, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        color = np.ascontiguousarray(self.color, dtype=np.float64)
        if n == 0:
            self.color = color.reshape(0, color.shape[-1] if color.ndim == 2 else 3)
        else:
            self.color = color.reshape(n, -1)
        if self.chol.shape[0] != n:
            raise ContractViolation("mu, chol and color must have the same length")
        if self.color.shape[1] not in (1, 3) and n:
            raise ContractViolation("colors must have 1 or 3 channels")
        self.width = int(self.width)
        self.height = int(self.height)

    @classmethod
    def empty(cls, width, height, channels=3):
        return cls(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, channels)), width, height)

    @classmethod
    def from_gaussians(cls, gaussians, width, height):
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(width, height)
        return cls(
            [g.mu for g in gaussians],
            [g.chol for g in gaussians],
            [g.color for g in gaussians],
            width,
            height,
        )

    def __len__(self):
        return self.mu.shape[0]

    def __getitem__(self, i) -> Gaussian2D:
        return Gaussian2D(tuple(self.mu[i]), tuple(self.chol[i]), tuple(self.color[i]))

    @property
    def gaussians(self) -> list[Gaussian2D]:
        return [self[i] for i in range(len(self))]

    @property
    def channels(self) -> int:
        return self.color.shape[1] if self.color.ndim == 2 and self.color.shape[1] else 3

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.mu.copy(), self.chol.copy(), self.color.copy(), self.width, self.height)

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(self.mu[idx], self.chol[idx], self.color[idx], self.width, self.height)

    def mu_pixels(self) -> np.ndarray:
        scale = np.array([self.width / 2.0, self.height / 2.0])
        return (self.mu + 1.0) * scale

    def project(self) -> None:
        """Clamp parameters back into their valid domain in place."""
        np.clip(self.mu, -1.0, 1.0, out=self.mu)
        np.maximum(self.chol[:, 0], EPS_SCALE, out=self.chol[:, 0])
        np.maximum(self.chol[:, 2], EPS_SCALE, out=self.chol[:, 2])

    def validate(self) -> None:
        if len(self) and (self.chol[:, 0].min() < EPS_SCALE or self.chol[:, 2].min() < EPS_SCALE):
            raise ContractViolation("l1 and l3 must be >= %g" % EPS_SCALE)


@dataclass
class SceneGradients:
    """Gradients parallel to a scene's arrays; ``d_mu`` is w.r.t. normalized positions."""

    d_mu: np.ndarray
    d_chol: np.ndarray
    d_color: np.ndarray

    def __len__(self):
        return self.d_mu.shape[0]


def covariance(g) -> np.ndarray:
    """Sigma = L L^T for a Gaussian2D or an ``(l1, l2, l3)`` triple."""
    l1, l2, l3 = g.chol if isinstance(g, Gaussian2D) else g
    return np.array([[l1 * l1, l1 * l2], [l1 * l2, l2 * l2 + l3 * l3]])


@dataclass
class RasterPlan:
    """Tile binning of a scene plus the per-pair kernel weights.

    ``weights`` is filled by :func:`render` and reused by
    :func:`render_backward` when the same plan is passed to both.
    """

    mu_px: np.ndarray
    boxes: np.ndarray
    offsets: np.ndarray
    entries: np.ndarray
    starts: np.ndarray
    tile: int = TILE_SIZE
    weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def pair_count(self) -> int:
        return int(self.starts[-1])


def plan(scene: GaussianScene, tile=TILE_SIZE, truncate=True) -> RasterPlan:
    mu_px = scene.mu_pixels()
    boxes = _kernels.gaussian_boxes(mu_px, scene.chol, scene.width, scene.height, truncate)
    offsets, entries = _kernels.bin_tiles(boxes, scene.width, scene.height, tile)
    starts = _kernels.pair_offsets(boxes, offsets, entries, scene.width, scene.height, tile)
    return RasterPlan(mu_px, boxes, offsets, entries, starts, tile)


def _weights(scene, rp):
    if rp.weights is None:
        sig = _kernels.pair_sigmas(
            rp.mu_px, scene.chol, rp.boxes, rp.offsets, rp.entries, rp.starts,
            scene.width, scene.height, rp.tile,
        )
        np.negative(sig, out=sig)
        rp.weights = np.exp(sig, out=sig)
    return rp.weights


def render(scene: GaussianScene, *, tile=TILE_SIZE, truncate=True, clamp=False, raster_plan=None) -> np.ndarray:
    """Accumulated-blending render to an ``(H, W, C)`` float64 image.

    Each Gaussian contributes only inside the axis-aligned box of its
    3-sigma ellipse when ``truncate`` is set. The output is left unclamped
    unless ``clamp`` is requested (export / metrics).
    """
    if len(scene) == 0:
        out = np.zeros((scene.height, scene.width, scene.channels))
    else:
        rp = raster_plan or plan(scene, tile, truncate)
        w = _weights(scene, rp)
        out = _kernels.accumulate(
            scene.color, w, rp.boxes, rp.offsets, rp.entries, rp.starts,
            scene.width, scene.height, rp.tile,
        )
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def render_backward(scene: GaussianScene, d_output, *, tile=TILE_SIZE, truncate=True, raster_plan=None) -> SceneGradients:
    """Exact gradients of the (unclamped, truncated) render w.r.t. every parameter."""
    n = len(scene)
    d_output = np.ascontiguousarray(d_output, dtype=np.float64)
    if d_output.ndim == 2:
        d_output = d_output[:, :, None]
    if d_output.shape[:2] != (scene.height, scene.width) or d_output.shape[2] != scene.channels:
        raise ContractViolation(
            f"d_output shape {d_output.shape} does not match raster "
            f"{scene.height}x{scene.width}x{scene.channels}"
        )
    if n == 0:
        return SceneGradients(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, scene.channels)))
    rp = raster_plan or plan(scene, tile, truncate)
    w = _weights(scene, rp)
    rec = _kernels.backward_tiles(
        rp.mu_px, scene.chol, scene.color, w, rp.boxes, rp.offsets, rp.entries, rp.starts,
        d_output, scene.width, scene.height, rp.tile,
    )
    g = _kernels.reduce_records(rec, rp.entries, n)
    d_mu = g[:, 0:2] * np.array([scene.width / 2.0, scene.height / 2.0])
    return SceneGradients(d_mu, g[:, 2:5].copy(), g[:, 5:].copy())
