"""The ``.cchc`` container: header, 16-bit decoder weights, seven latent streams.

Layout (all integers little-endian)::

    magic      4s   b"CCHC"
    version    u8
    height     u16
    width      u16
    levels     u8   (7)
    bounds     levels x (i16 vmin, i16 vmax)
    exponents  15 x i8, one per weight tensor in WEIGHT_ORDER
    lengths    (1 + levels) x u32: weight section, then each latent stream
    weights    i16 values of every tensor in WEIGHT_ORDER, row-major
    streams    the level streams, level 0 first
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .arm import ARM_SHAPES
from .latents import NUM_LEVELS
from .synthesis import SYNTHESIS_SHAPES

MAGIC = b"CCHC"
VERSION = 1

WEIGHT_SHAPES = {**{"syn." + k: v for k, v in SYNTHESIS_SHAPES.items()}, **{"arm." + k: v for k, v in ARM_SHAPES.items()}}
WEIGHT_ORDER = tuple(WEIGHT_SHAPES)
INT16_LIMIT = 2**15


class StepError(ValueError):
    """A weight does not fit 16 bits at the requested step."""


class ParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Header:
    height: int
    width: int
    bounds: list
    exponents: dict
    lengths: list
    version: int = VERSION

    @property
    def levels(self):
        return len(self.bounds)

    def size(self):
        return header_size(self.levels)


@dataclass
class QuantizedWeights:
    """Integer weights and per-tensor power-of-two step exponents."""

    values: dict
    exponents: dict

    def dequantize(self):
        return {k: self.values[k].astype(np.float64) * 2.0 ** self.exponents[k] for k in WEIGHT_ORDER}

    def group(self, prefix):
        """Integer values and exponents of one network, with the prefix stripped."""
        n = len(prefix) + 1
        vals = {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}
        exps = {k[n:]: e for k, e in self.exponents.items() if k.startswith(prefix + ".")}
        return vals, exps

    def dequantized_group(self, prefix):
        vals, exps = self.group(prefix)
        return {k: v.astype(np.float64) * 2.0 ** exps[k] for k, v in vals.items()}

    def nbytes(self):
        return 2 * sum(v.size for v in self.values.values())

    def __eq__(self, other):
        return (
            isinstance(other, QuantizedWeights)
            and self.exponents == other.exponents
            and all(np.array_equal(self.values[k], other.values[k]) for k in WEIGHT_ORDER)
        )


def header_size(levels=NUM_LEVELS):
    return 4 + 1 + 2 + 2 + 1 + 4 * levels + len(WEIGHT_ORDER) + 4 * (levels + 1)


def quantize_tensor(w, exponent):
    w = np.asarray(w, dtype=np.float64)
    q = np.sign(w) * np.floor(np.abs(w) * 2.0**-exponent + 0.5)
    if q.size and np.max(np.abs(q)) >= INT16_LIMIT:
        raise StepError(f"step 2^{exponent} overflows 16 bits (max |w| = {np.max(np.abs(w)):.4g})")
    return q.astype(np.int64)


def smallest_exponent(w, lo=-14, hi=-8):
    """Finest step in [2^lo, 2^hi] that keeps every integer inside int16, or above if needed."""
    e = lo
    while True:
        try:
            quantize_tensor(w, e)
            return e
        except StepError:
            if e >= 30:
                raise
            e += 1


def quantize_weights(weights, step_exponent):
    """Quantize a ``{name: array}`` dict over WEIGHT_ORDER.

    ``step_exponent`` is one int for all tensors or a per-name dict.
    """
    if isinstance(step_exponent, dict):
        exps = {k: int(step_exponent[k]) for k in WEIGHT_ORDER}
    else:
        exps = {k: int(step_exponent) for k in WEIGHT_ORDER}
    values = {}
    for k in WEIGHT_ORDER:
        arr = np.asarray(weights[k])
        if arr.shape != WEIGHT_SHAPES[k]:
            raise ValueError(f"{k}: shape {arr.shape}, expected {WEIGHT_SHAPES[k]}")
        values[k] = quantize_tensor(arr, exps[k])
    return QuantizedWeights(values, exps)


def _weights_payload(weights):
    return b"".join(weights.values[k].astype("<i2").tobytes() for k in WEIGHT_ORDER)


def write_bitstream(header, weights, streams):
    """Serialize; ``header.lengths`` is recomputed from the payloads."""
    if len(streams) != header.levels:
        raise ValueError(f"{len(streams)} streams for {header.levels} levels")
    payload = _weights_payload(weights)
    lengths = [len(payload)] + [len(s) for s in streams]
    header.lengths = lengths
    header.exponents = dict(weights.exponents)
    parts = [
        MAGIC,
        struct.pack("<BHHB", header.version, header.height, header.width, header.levels),
        b"".join(struct.pack("<hh", lo, hi) for lo, hi in header.bounds),
        struct.pack("<%db" % len(WEIGHT_ORDER), *(weights.exponents[k] for k in WEIGHT_ORDER)),
        struct.pack("<%dI" % len(lengths), *lengths),
        payload,
        *streams,
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_bitstream(data):
    """Parse container bytes into (Header, QuantizedWeights, list of streams)."""
    data = bytes(data)
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic, expected b'CCHC'", 0)
    version, height, width, levels = r.unpack("<BHHB", "header")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if levels != NUM_LEVELS:
        raise ParseError(f"unsupported level count {levels}", 9)
    if height < 1 or width < 1:
        raise ParseError(f"bad dimensions {height}x{width}", 5)
    bounds = []
    for i in range(levels):
        at = r.pos
        lo, hi = r.unpack("<hh", f"bounds of level {i}")
        if lo > hi:
            raise ParseError(f"level {i} has vmin {lo} > vmax {hi}", at)
        bounds.append((lo, hi))
    exps = dict(zip(WEIGHT_ORDER, r.unpack("<%db" % len(WEIGHT_ORDER), "step exponents")))
    lengths_at = r.pos
    lengths = list(r.unpack("<%dI" % (levels + 1), "section lengths"))
    expected_weights = 2 * sum(int(np.prod(s)) for s in WEIGHT_SHAPES.values())
    if lengths[0] != expected_weights:
        raise ParseError(f"weight section is {lengths[0]} bytes, expected {expected_weights}", lengths_at)
    if r.pos + sum(lengths) != len(data):
        raise ParseError(
            f"section lengths sum to {sum(lengths)} but {len(data) - r.pos} payload bytes are present", lengths_at
        )
    raw = r.take(lengths[0], "weights")
    values, off = {}, 0
    for k in WEIGHT_ORDER:
        n = int(np.prod(WEIGHT_SHAPES[k]))
        values[k] = np.frombuffer(raw, dtype="<i2", count=n, offset=off).astype(np.int64).reshape(WEIGHT_SHAPES[k])
        off += 2 * n
    streams = [r.take(n, f"latent stream {i}") for i, n in enumerate(lengths[1:])]
    header = Header(height, width, bounds, exps, lengths, version)
    return header, QuantizedWeights(values, exps), streams


def decoder_weight_bytes():
    return 2 * sum(int(np.prod(s)) for s in WEIGHT_SHAPES.values())
