"""Adam, the overfitting loop and quantization-aware fine-tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .allocation import AllocationConfig, random_init, structure_guided_init
from .exceptions import NumericFailure
from .imagery import as_image, write_csv
from .metrics import psnr
from .objectives import GeometryTarget, train_loss, tune_loss
from .quantization import QuantConfig, QuantizedScene, freeze, init_state, quantize_backward, quantize_scene
from .splat import GaussianScene, plan, render, render_backward

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "total", "mse", "geometry", "bitwidth", "residual", "psnr")


@dataclass
class OptimState:
    """Adam moments keyed by parameter name."""

    lr: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: dict, grads: dict, state: OptimState) -> dict:
    """One bias-corrected Adam update, in place.

    Entries whose gradient is not finite are left untouched (parameter and
    moments) and counted in ``state.skipped``.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        lr = state.lr[name] if isinstance(state.lr, dict) else state.lr
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        ok = np.isfinite(g)
        if not ok.all():
            state.skipped += int((~ok).sum())
            g = np.where(ok, g, 0.0)
            m_new = np.where(ok, state.beta1 * m + (1 - state.beta1) * g, m)
            v_new = np.where(ok, state.beta2 * v + (1 - state.beta2) * g * g, v)
            m[...] = m_new
            v[...] = v_new
            upd = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            p -= np.where(ok, upd, 0.0)
            continue
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class FitConfig:
    """Hyperparameters for fitting and for quantization-aware fine-tuning."""

    n_gaussians: int = 3000
    iterations: int = 20_000
    lr_position: float = 1e-3
    lr_color: float = 1e-2
    lr_chol: float = 5e-2
    lambda_g: float = 0.06
    seed: int = 0
    init: str = "sgi"
    init_scale: float = 0.5
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    target_regions: int | None = None
    log_every: int = 100
    # fine-tuning
    tune_iterations: int = 10_000
    lambda_b: float = 0.0012
    lambda_r: float = 1.0
    lr_quant: float = 1e-3
    lr_range: float = 1e-2
    lr_bits: float = 1e-2
    quant: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be >= 1")
        if self.iterations < 0 or self.tune_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if min(self.lambda_g, self.lambda_b, self.lambda_r) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.init not in ("sgi", "random"):
            raise ValueError("init must be 'sgi' or 'random'")


def initial_scene(image, cfg: FitConfig) -> GaussianScene:
    if cfg.init == "random":
        return random_init(image, cfg.n_gaussians, cfg.seed, cfg.init_scale)
    scene, _ = structure_guided_init(image, cfg.n_gaussians, cfg.allocation,
                                     target_regions=cfg.target_regions, seed=cfg.seed,
                                     scale_factor=cfg.init_scale)
    return scene


def _scene_params(scene):
    return {"mu": scene.mu, "chol": scene.chol, "color": scene.color}


def _record(history, it, rep, recon, image):
    row = (it,) + rep.row() + (psnr(np.clip(recon, 0.0, 1.0), image),)
    history.append(row)
    return row


def _check_finite(scene, history):
    if not (np.isfinite(history[-1][1]) and np.all(np.isfinite(scene.mu))
            and np.all(np.isfinite(scene.chol)) and np.all(np.isfinite(scene.color))):
        raise NumericFailure("optimization diverged to non-finite values")


def fit(image, cfg: FitConfig = FitConfig(), scene: GaussianScene | None = None, callback=None):
    """Overfit Gaussians to ``image`` with the MSE + geometry objective.

    Returns ``(scene, history)`` where history rows follow ``HISTORY_COLUMNS``.
    A final row is always recorded for the returned scene.
    """
    image = as_image(image)
    scene = initial_scene(image, cfg) if scene is None else scene.copy()
    opt = OptimState(lr={"mu": cfg.lr_position, "color": cfg.lr_color, "chol": cfg.lr_chol})
    gt = GeometryTarget(image)
    history = []
    params = _scene_params(scene)
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        logging_step = cfg.log_every and it % cfg.log_every == 0
        rp = plan(scene)
        recon = render(scene, raster_plan=rp)
        rep = train_loss(recon, image, cfg.lambda_g, gt if (cfg.lambda_g or logging_step) else None)
        if logging_step:
            row = _record(history, it, rep, recon, image)
            if callback:
                callback(row)
        g = render_backward(scene, rep.d_image, raster_plan=rp)
        adam_step(params, {"mu": g.d_mu, "chol": g.d_chol, "color": g.d_color}, opt)
        scene.project()
    recon = render(scene)
    _record(history, cfg.iterations, train_loss(recon, image, cfg.lambda_g, gt), recon, image)
    _check_finite(scene, history)
    log.info("fit: %d iterations in %.1fs, psnr %.2f dB", cfg.iterations,
             time.perf_counter() - t0, history[-1][-1])
    return scene, history


def finetune(scene: GaussianScene, image, cfg: FitConfig = FitConfig(), callback=None):
    """Quantization-aware fine-tuning with the bitwidth and residual penalties.

    Gaussian parameters, covariance ranges, soft bitwidths and codebooks are
    all updated by Adam. Returns ``(QuantizedScene, history)``.
    """
    image = as_image(image)
    scene = scene.copy()
    state = init_state(scene, cfg.quant)
    if len(scene) == 0:
        return freeze(scene, state), []
    opt = OptimState(lr={
        "mu": cfg.lr_position, "color": cfg.lr_color, "chol": cfg.lr_chol,
        "cov_min": cfg.lr_range, "cov_max": cfg.lr_range, "b": cfg.lr_bits,
        "codebook": cfg.lr_quant,
    })
    params = _scene_params(scene)
    params.update(cov_min=state.cov_min, cov_max=state.cov_max, b=state.b,
                  codebook=state.codebook.stages)
    gt = GeometryTarget(image)
    history = []
    for it in range(cfg.tune_iterations):
        logging_step = cfg.log_every and it % cfg.log_every == 0
        deq, l_b, l_r, cache = quantize_scene(scene, state)
        rp = plan(deq)
        recon = render(deq, raster_plan=rp)
        rep = tune_loss(recon, image, cfg.lambda_g, cfg.lambda_b, l_b, cfg.lambda_r, l_r,
                        gt if (cfg.lambda_g or logging_step) else None)
        if logging_step:
            row = _record(history, it, rep, recon, image)
            if callback:
                callback(row)
        g = render_backward(deq, rep.d_image, raster_plan=rp)
        gs, gq = quantize_backward(state, cache, g, cfg.lambda_b, cfg.lambda_r)
        adam_step(params, {
            "mu": gs.d_mu, "chol": gs.d_chol, "color": gs.d_color,
            "cov_min": gq.d_cov_min, "cov_max": gq.d_cov_max, "b": gq.d_b,
            "codebook": gq.d_codebook,
        }, opt)
        scene.project()
        state.project()
    q = freeze(scene, state)
    deq = q.dequantize()
    recon = render(deq)
    _, l_b, l_r, _ = quantize_scene(scene, state)
    rep = tune_loss(recon, image, cfg.lambda_g, cfg.lambda_b, l_b, cfg.lambda_r, l_r, gt)
    _record(history, cfg.tune_iterations, rep, recon, image)
    _check_finite(deq, history)
    return q, history


def write_history(path, history) -> None:
    write_csv(path, HISTORY_COLUMNS, history)
