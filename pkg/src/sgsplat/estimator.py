"""scikit-learn style front end.

>>> est = GaussianImageCodec(n_gaussians=500, iterations=300)
>>> est.fit(image).score(image)          # PSNR of the float render
>>> stream = est.transform(image)        # fine-tune, quantize, encode
>>> est.predict(quantized=True)          # render of the decoded stream
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import codec
from .allocation import AllocationConfig
from .imagery import to_uint8
from .metrics import ms_ssim, psnr
from .quantization import QuantConfig
from .splat import render
from .training import FitConfig, finetune, fit
from .validation import check_count, check_image, check_nonnegative, parse_bit_range


class GaussianImageCodec(BaseEstimator):
    """Fit a 2D Gaussian representation of one image and compress it.

    ``fit`` overfits the float scene, ``transform`` runs quantization-aware
    fine-tuning and returns the encoded :class:`~sgsplat.codec.Bitstream`,
    ``predict`` renders either scene.
    """

    def __init__(self, n_gaussians=3000, iterations=20_000, lambda_g=0.06, init="sgi", seed=0,
                 lr_position=1e-3, lr_color=1e-2, lr_chol=5e-2,
                 tune_iterations=10_000, lambda_b=0.0012, lambda_r=1.0,
                 bit_range=(6, 16), pos_bits=12, rvq_stages=2, rvq_k=256, log_every=100):
        self.n_gaussians = n_gaussians
        self.iterations = iterations
        self.lambda_g = lambda_g
        self.init = init
        self.seed = seed
        self.lr_position = lr_position
        self.lr_color = lr_color
        self.lr_chol = lr_chol
        self.tune_iterations = tune_iterations
        self.lambda_b = lambda_b
        self.lambda_r = lambda_r
        self.bit_range = bit_range
        self.pos_bits = pos_bits
        self.rvq_stages = rvq_stages
        self.rvq_k = rvq_k
        self.log_every = log_every

    def to_config(self) -> FitConfig:
        """Validate the hyperparameters and build the training configuration."""
        quant = QuantConfig(bit_range=parse_bit_range(self.bit_range),
                            pos_bits=check_count(self.pos_bits, "pos_bits", 1),
                            rvq_stages=check_count(self.rvq_stages, "rvq_stages", 1),
                            rvq_k=check_count(self.rvq_k, "rvq_k", 1), seed=self.seed)
        return FitConfig(
            n_gaussians=check_count(self.n_gaussians, "n_gaussians", 1),
            iterations=check_count(self.iterations, "iterations"),
            lr_position=self.lr_position, lr_color=self.lr_color, lr_chol=self.lr_chol,
            lambda_g=check_nonnegative(self.lambda_g, "lambda_g"),
            seed=check_count(self.seed, "seed"), init=self.init,
            allocation=AllocationConfig(),
            log_every=check_count(self.log_every, "log_every"),
            tune_iterations=check_count(self.tune_iterations, "tune_iterations"),
            lambda_b=check_nonnegative(self.lambda_b, "lambda_b"),
            lambda_r=check_nonnegative(self.lambda_r, "lambda_r"),
            quant=quant,
        )

    def fit(self, X, y=None):
        image = check_image(X)
        cfg = self.to_config()
        self.scene_, self.history_ = fit(image, cfg)
        self.target_ = image
        for attr in ("quantized_", "bitstream_", "tune_history_"):
            self.__dict__.pop(attr, None)
        return self

    def transform(self, X=None):
        """Fine-tune against ``X`` (default: the image seen by ``fit``) and encode."""
        check_is_fitted(self, "scene_")
        image = self.target_ if X is None else check_image(X)
        if image.shape != self.target_.shape:
            raise ValueError(f"image shape {image.shape} differs from fitted {self.target_.shape}")
        self.quantized_, self.tune_history_ = finetune(self.scene_, image, self.to_config())
        self.bitstream_ = codec.encode(self.quantized_)
        return self.bitstream_

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)

    def predict(self, X=None, quantized=False, as_uint8=False):
        """Render the fitted (or decoded, with ``quantized=True``) scene."""
        if quantized:
            check_is_fitted(self, "bitstream_")
            _, scene = codec.decode(self.bitstream_)
        else:
            check_is_fitted(self, "scene_")
            scene = self.scene_
        out = render(scene, clamp=True)
        return to_uint8(out) if as_uint8 else out

    def score(self, X, y=None, quantized=False):
        """PSNR (dB) of the render against ``X``."""
        return psnr(self.predict(quantized=quantized), check_image(X))

    def evaluate(self, X, quantized=False) -> dict:
        image = check_image(X)
        recon = self.predict(quantized=quantized)
        out = {"psnr": psnr(recon, image), "ms_ssim": ms_ssim(recon, image)}
        if quantized:
            out["bpp"] = codec.bpp(self.bitstream_, image.shape[1], image.shape[0])
            out["mean_bits"] = self.quantized_.mean_bits()
        return out
