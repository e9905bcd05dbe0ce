"""32-bit range coder with byte-wise renormalization and 16-bit frequencies.

The encoder keeps a 33-bit ``low`` and resolves carries through a cached
byte plus a run of pending 0xFF bytes. The stream is flushed with the smallest
multiple of 2**24 inside the final interval and only its top byte is
written; the decoder reads the three remaining zero bytes past the end. The
decoder mirrors the flush rule at the end of a stream, so a stream that does
not terminate exactly as the encoder would have left it is rejected.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from functools import lru_cache

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class EncodingError(ValueError):
    pass


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedCdf:
    """Cumulative frequencies of the integer alphabet ``vmin..vmax``.

    ``cum`` has ``vmax - vmin + 2`` entries, from 0 to ``2**16``, strictly
    increasing.
    """

    vmin: int
    vmax: int
    cum: tuple

    def freq(self, value):
        i = value - self.vmin
        return self.cum[i + 1] - self.cum[i]

    def masses(self):
        return [b - a for a, b in zip(self.cum, self.cum[1:])]

    def contains(self, value):
        return self.vmin <= value <= self.vmax


def _laplace_cdf(t, mu, scale):
    z = (t - mu) / scale
    if z < 0:
        return 0.5 * math.exp(z)
    return 1.0 - 0.5 * math.exp(-z)


def laplace_masses(mu, scale, vmin, vmax):
    """Bucket probabilities of a discretized Laplace, tails folded into the end buckets."""
    edges = [_laplace_cdf(v + 0.5, mu, scale) for v in range(vmin, vmax)]
    upper = edges + [1.0]
    lower = [0.0] + edges
    return [max(b - a, 0.0) for a, b in zip(lower, upper)]


def quantize_masses(probs, total=TOTAL):
    """Integer frequencies summing to ``total``, each at least 1.

    One unit is reserved per symbol; the rest is split in proportion to
    ``probs`` with largest-remainder rounding (ties go to the lower index).
    """
    n = len(probs)
    if n > total:
        raise ValueError(f"alphabet of {n} symbols does not fit {total} frequency units")
    s = math.fsum(probs)
    if not s > 0:
        probs, s = [1.0] * n, float(n)
    spare = total - n
    shares = [p / s * spare for p in probs]
    freqs = [1 + int(math.floor(x)) for x in shares]
    left = total - sum(freqs)
    if left:
        order = sorted(range(n), key=lambda i: (-(shares[i] - math.floor(shares[i])), i))
        for i in order[:left]:
            freqs[i] += 1
    return freqs


def cdf_from_freqs(vmin, freqs):
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    return QuantizedCdf(vmin, vmin + len(freqs) - 1, tuple(cum))


def build_cdf(mu, scale, vmin, vmax):
    """Quantized Laplace(mu, scale) CDF over ``vmin..vmax``."""
    if vmin > vmax:
        raise ValueError(f"empty alphabet: vmin={vmin} > vmax={vmax}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return cdf_from_freqs(vmin, quantize_masses(laplace_masses(mu, scale, vmin, vmax)))


@lru_cache(maxsize=1 << 16)
def cached_cdf(mu, scale, vmin, vmax):
    return build_cdf(mu, scale, vmin, vmax)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.pending = 1
        self.out = bytearray()
        self._first = True

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            byte = self.cache
            while self.pending:
                if self._first:
                    # the leading byte is always zero; it is not stored
                    self._first = False
                else:
                    self.out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self.pending -= 1
            self.cache = (low >> 24) & 0xFF
        self.pending += 1
        self.low = (low << 8) & MASK32

    def encode(self, cdf, value):
        if not cdf.contains(value):
            raise EncodingError(f"symbol {value} outside alphabet [{cdf.vmin}, {cdf.vmax}]")
        i = value - cdf.vmin
        start, stop = cdf.cum[i], cdf.cum[i + 1]
        r = self.range >> PRECISION
        self.low += r * start
        if stop == TOTAL:
            self.range -= r * start
        else:
            self.range = r * (stop - start)
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self):
        """Flush and return the stream bytes."""
        self.low = flush_point(self.low)
        for _ in range(2):
            self._shift_low()
        return bytes(self.out)


def flush_point(low):
    """Smallest multiple of 2**24 not below ``low``; inside the interval since range >= 2**24."""
    return -(-low // TOP) * TOP


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = MASK32
        self.code = 0
        self.window = 0
        for _ in range(4):
            self._shift_in()

    def _next_byte(self):
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def _shift_in(self):
        b = self._next_byte()
        self.code = (self.code << 8) | b
        self.window = ((self.window << 8) | b) & MASK32

    def decode(self, cdf):
        cum = cdf.cum
        if len(cum) == 2:
            return cdf.vmin
        if self.code >= self.range:
            raise DecodeError("code value outside the coding interval (corrupt stream)")
        r = self.range >> PRECISION
        target = min(self.code // r, TOTAL - 1)
        i = bisect_right(cum, target) - 1
        start, stop = cum[i], cum[i + 1]
        self.code -= r * start
        if stop == TOTAL:
            self.range -= r * start
        else:
            self.range = r * (stop - start)
        while self.range < TOP:
            self.range <<= 8
            self._shift_in()
        return cdf.vmin + i

    def finish(self):
        """Check that the stream ends exactly where the encoder's flush would put it."""
        if self.pos - 3 != len(self.data):
            raise DecodeError(f"stream length {len(self.data)} does not match the {self.pos - 3} bytes consumed")
        if self.code >= self.range:
            raise DecodeError("code value outside the coding interval (corrupt stream)")
        low = (self.window - self.code) & MASK32
        expected = flush_point(low) & MASK32
        if expected != self.window:
            raise DecodeError("stream does not terminate at the expected flush point (truncated or corrupt)")


def encode_stream(symbols, cdfs):
    """Range-code ``symbols``; ``cdfs`` yields one QuantizedCdf per symbol."""
    enc = RangeEncoder()
    for value, cdf in zip(symbols, cdfs):
        enc.encode(cdf, int(value))
    return enc.finish()


def decode_stream(data, cdf_provider, count):
    """Decode ``count`` symbols; ``cdf_provider(k, decoded_so_far)`` gives the k-th CDF."""
    dec = RangeDecoder(data)
    out = []
    for k in range(count):
        out.append(dec.decode(cdf_provider(k, out)))
    dec.finish()
    return out
