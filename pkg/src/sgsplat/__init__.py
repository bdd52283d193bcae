"""Structure-guided 2D Gaussian splatting for image representation and compression."""

from importlib.metadata import PackageNotFoundError, version

from .allocation import AllocationConfig, structure_guided_init, random_init
from .codec import Bitstream, bpp, decode, encode, load_scene, save_scene
from .estimator import GaussianImageCodec
from .exceptions import (
    ContractViolation,
    CorruptionError,
    ImageFormatError,
    NumericFailure,
    OverlapError,
    SplatError,
)
from .imagery import load_image, save_image, sobel, to_grayscale
from .metrics import RdPoint, bd_psnr, bd_rate, ms_ssim, psnr
from .quantization import QuantConfig, QuantizedScene
from .segmentation import SegmentationMap, slic_segment
from .splat import Gaussian2D, GaussianScene, render, render_backward
from .training import FitConfig, finetune, fit

try:
    __version__ = version("sgsplat")
except PackageNotFoundError:  # pragma: no cover - source checkout without install
    __version__ = "0.0.0"

__all__ = [
    "AllocationConfig", "Bitstream", "ContractViolation", "CorruptionError", "FitConfig",
    "Gaussian2D", "GaussianImageCodec", "GaussianScene", "ImageFormatError", "NumericFailure",
    "OverlapError", "QuantConfig", "QuantizedScene", "RdPoint", "SegmentationMap", "SplatError",
    "bd_psnr", "bd_rate", "bpp", "decode", "encode", "finetune", "fit", "load_image",
    "load_scene", "ms_ssim", "psnr", "random_init", "render", "render_backward", "save_image",
    "save_scene", "slic_segment", "sobel", "structure_guided_init", "to_grayscale",
]
