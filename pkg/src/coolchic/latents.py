"""The latent pyramid: seven single-channel grids from full resolution to 1/64."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, round_half_away, round_ste

NUM_LEVELS = 7
INIT_RANGE = 0.3
LATENT_MIN = -(2**11)
LATENT_MAX = 2**11 - 1

QUANT_MODES = ("noise", "ste", "hard")


def level_shapes(height, width, levels=NUM_LEVELS):
    """Extents of every level; each is the ceiling half of the previous one."""
    if height < 1 or width < 1:
        raise ValueError(f"image dimensions must be positive, got {height}x{width}")
    shapes = [(int(height), int(width))]
    for _ in range(levels - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes


@dataclass
class LatentPyramid:
    height: int
    width: int
    levels: list

    @property
    def shapes(self):
        return [tuple(t.shape) for t in self.levels]

    def value_count(self):
        return value_count(self)

    def values_per_pixel(self):
        return self.value_count() / (self.height * self.width)

    def is_integer(self):
        return all(np.array_equal(t.data, np.round(t.data)) for t in self.levels)

    def as_int_arrays(self):
        return [t.data.astype(np.int64) for t in self.levels]


def init_pyramid(height, width, rng=None, dtype=np.float32):
    """Random pyramid with values uniform in [-0.3, 0.3]."""
    rng = np.random.default_rng(rng)
    levels = [
        Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=s).astype(dtype), requires_grad=True)
        for s in level_shapes(height, width)
    ]
    return LatentPyramid(int(height), int(width), levels)


def pyramid_from_arrays(arrays, dtype=np.float32, requires_grad=False):
    arrays = [np.asarray(a) for a in arrays]
    h, w = arrays[0].shape
    expected = level_shapes(h, w, len(arrays))
    got = [a.shape for a in arrays]
    if got != expected:
        raise ValueError(f"level extents {got} do not match {expected}")
    return LatentPyramid(h, w, [Tensor(a.astype(dtype), requires_grad=requires_grad) for a in arrays])


def quantize(pyramid, mode, rng=None):
    """Quantization proxy used during training, or hard rounding.

    ``noise`` adds fresh U(-0.5, 0.5) per element, ``ste`` rounds with a
    straight-through gradient and ``hard`` returns detached integers.
    """
    if mode == "noise":
        rng = np.random.default_rng(rng)
        out = []
        for t in pyramid.levels:
            u = rng.uniform(-0.5, 0.5, size=t.shape).astype(t.dtype)
            out.append(t + u)
    elif mode == "ste":
        out = [round_ste(t) for t in pyramid.levels]
    elif mode == "hard":
        out = [Tensor(round_half_away(t.data)) for t in pyramid.levels]
    else:
        raise ValueError(f"unknown quantization mode {mode!r}; expected one of {QUANT_MODES}")
    return LatentPyramid(pyramid.height, pyramid.width, out)


def clip_for_coding(arrays):
    """Clip integer levels to the coder's alphabet and return them with per-level bounds."""
    clipped = [np.clip(np.asarray(a, dtype=np.int64), LATENT_MIN, LATENT_MAX) for a in arrays]
    bounds = [(int(a.min()), int(a.max())) for a in clipped]
    return clipped, bounds


def value_count(pyramid):
    return sum(int(np.prod(s)) for s in pyramid.shapes)


def values_per_pixel_bound(levels=NUM_LEVELS):
    return math.fsum(4.0**-i for i in range(levels))
