"""Training and tuning objectives with gradients w.r.t. the rendered image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation
from ._kernels import sobel_loss_grad
from .imagery import GRAY_WEIGHTS, SOBEL_X, SOBEL_Y, sobel_xy


@dataclass
class LossReport:
    total: float
    mse: float
    geometry: float
    bitwidth: float
    residual: float
    d_image: np.ndarray

    def row(self):
        return (self.total, self.mse, self.geometry, self.bitwidth, self.residual)


def _check_pair(recon, target):
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ContractViolation(f"shape mismatch: {recon.shape} vs {target.shape}")
    return recon, target


def mse_loss(recon, target):
    recon, target = _check_pair(recon, target)
    diff = recon - target
    return float(np.mean(diff * diff)), diff * (2.0 / diff.size)


def _gray(img):
    if img.ndim == 3 and img.shape[2] == 3:
        # channel-sequential sum, the order the fused kernel uses
        return img[:, :, 0] * GRAY_WEIGHTS[0] + img[:, :, 1] * GRAY_WEIGHTS[1] + img[:, :, 2] * GRAY_WEIGHTS[2]
    return img.reshape(img.shape[0], img.shape[1])


class GeometryTarget:
    """Sobel maps and weights of a fixed ground-truth image.

    The weights ``|G_x|``, ``|G_y|`` depend only on the target, so they are
    computed once and treated as constants by the gradient.
    """

    def __init__(self, target):
        target = np.asarray(target, dtype=np.float64)
        self.shape = target.shape
        self.gx, self.gy = sobel_xy(_gray(target))
        self.wx = np.abs(self.gx)
        self.wy = np.abs(self.gy)

    def loss(self, recon):
        recon = np.asarray(recon, dtype=np.float64)
        if recon.shape != self.shape:
            raise ContractViolation(f"shape mismatch: {recon.shape} vs {self.shape}")
        if recon.ndim == 2:
            recon = recon[:, :, None]
        gray_w = GRAY_WEIGHTS if recon.shape[2] == 3 else np.ones(1)
        total, d_img = sobel_loss_grad(np.ascontiguousarray(recon), gray_w, SOBEL_X, SOBEL_Y,
                                       self.gx, self.gy, self.wx, self.wy)
        hw = self.gx.size
        return total / hw, (d_img / hw).reshape(self.shape)


def geometry_loss(recon, target):
    """Gradient-magnitude-weighted squared Sobel discrepancy, normalized by ``H*W``."""
    recon, target = _check_pair(recon, target)
    return GeometryTarget(target).loss(recon)


def train_loss(recon, target, lambda_g=0.06, geometry_target=None) -> LossReport:
    mse, d = mse_loss(recon, target)
    geo = 0.0
    if lambda_g or geometry_target is not None:
        gt = geometry_target or GeometryTarget(target)
        geo, dg = gt.loss(recon)
        if lambda_g:
            d = d + lambda_g * dg
    return LossReport(mse + lambda_g * geo, mse, geo, 0.0, 0.0, d)


def tune_loss(recon, target, lambda_g=0.06, lambda_b=0.0012, bitwidth=0.0, lambda_r=1.0,
              residual=0.0, geometry_target=None) -> LossReport:
    """Tuning objective; bitwidth and residual terms add to the scalar only."""
    rep = train_loss(recon, target, lambda_g, geometry_target)
    rep.total = rep.total + lambda_b * bitwidth + lambda_r * residual
    rep.bitwidth = float(bitwidth)
    rep.residual = float(residual)
    return rep
