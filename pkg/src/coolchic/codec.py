"""Entropy coding of latent levels and full bitstream decoding."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import rangecoder
from .arm import TEMPLATE, arm_fixed, context_matrix, fixed_to_float
from .bitstream import read_bitstream
from .latents import level_shapes
from .synthesis import decode_image_fixed


@lru_cache(maxsize=1 << 17)
def level_cdf(mu_fixed, log_scale_fixed, vmin, vmax):
    """CDF for one symbol, keyed on the integer ARM outputs."""
    mu, scale = fixed_to_float(mu_fixed, log_scale_fixed)
    return rangecoder.build_cdf(mu, scale, vmin, vmax)


def _arm_weights(qweights):
    vals, exps = qweights.group("arm")
    return {k: np.asarray(v, dtype=np.int64) for k, v in vals.items()}, exps


def encode_level(grid, bounds, qweights):
    """Range-code one integer level under the integer ARM."""
    grid = np.asarray(grid, dtype=np.int64)
    vmin, vmax = bounds
    symbols = grid.reshape(-1).tolist()
    if vmin == vmax:
        return rangecoder.encode_stream(symbols, [rangecoder.cdf_from_freqs(vmin, [rangecoder.TOTAL])] * len(symbols))
    w, e = _arm_weights(qweights)
    mu, ls = arm_fixed(context_matrix(grid), w, e)
    cdfs = (level_cdf(m, s, vmin, vmax) for m, s in zip(mu.tolist(), ls.tolist()))
    return rangecoder.encode_stream(symbols, cdfs)


def decode_level(stream, shape, bounds, qweights):
    """Inverse of :func:`encode_level`; contexts come from already decoded values."""
    h, w = shape
    vmin, vmax = bounds
    n = h * w
    if vmin == vmax:
        flat = rangecoder.decode_stream(stream, lambda k, out: rangecoder.cdf_from_freqs(vmin, [rangecoder.TOTAL]), n)
        return np.asarray(flat, dtype=np.int64).reshape(h, w)
    wts, exps = _arm_weights(qweights)
    py = max(-dy for dy, _ in TEMPLATE)
    px = max(abs(dx) for _, dx in TEMPLATE)
    padded = np.zeros((h + py, w + 2 * px), dtype=np.int64)
    dys = np.array([py + dy for dy, _ in TEMPLATE])
    dxs = np.array([px + dx for _, dx in TEMPLATE])
    dec = rangecoder.RangeDecoder(stream)
    for y in range(h):
        row = padded[py + y]
        for x in range(w):
            ctx = padded[dys + y, dxs + x]
            mu, ls = arm_fixed(ctx, wts, exps)
            row[px + x] = dec.decode(level_cdf(int(mu), int(ls), vmin, vmax))
    dec.finish()
    return padded[py:, px : px + w].copy()


def encode_latents(int_levels, bounds, qweights):
    return [encode_level(g, b, qweights) for g, b in zip(int_levels, bounds)]


def decode_latents(streams, height, width, bounds, qweights, parallel=False):
    shapes = level_shapes(height, width, len(streams))
    jobs = list(zip(streams, shapes, bounds))
    if parallel:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            return list(pool.map(lambda j: decode_level(j[0], j[1], j[2], qweights), jobs))
    return [decode_level(s, sh, b, qweights) for s, sh, b in jobs]


@dataclass
class Decoded:
    image: np.ndarray  # [3,H,W] float64 in [0,1]
    levels: list
    header: object
    weights: object
    seconds: float


def decode_bitstream(data, parallel=False):
    """Bytes of a ``.cchc`` file to the reconstructed image."""
    t0 = time.perf_counter()
    header, qweights, streams = read_bitstream(data)
    levels = decode_latents(streams, header.height, header.width, header.bounds, qweights, parallel)
    image = decode_image_fixed(levels, qweights.dequantized_group("syn"), header.height, header.width)
    return Decoded(image, levels, header, qweights, time.perf_counter() - t0)
