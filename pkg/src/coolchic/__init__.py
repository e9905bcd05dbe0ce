"""Overfitted low-complexity neural image codec."""

from .allocator import Allocation, RdPoint, allocate_maxmin
from .codec import decode_bitstream
from .metrics import distortion, ms_ssim, psnr
from .trainer import EncodeResult, TrainConfig, encode_image, sweep

__all__ = [
    "Allocation",
    "EncodeResult",
    "RdPoint",
    "TrainConfig",
    "allocate_maxmin",
    "decode_bitstream",
    "distortion",
    "encode_image",
    "ms_ssim",
    "psnr",
    "sweep",
]

__version__ = "0.1.0"
