import numpy as np
import pytest

from coolchic.bitstream import WEIGHT_ORDER, WEIGHT_SHAPES, Header, ParseError, quantize_weights, write_bitstream
from coolchic.codec import decode_bitstream, decode_latents, decode_level, encode_latents, encode_level
from coolchic.latents import level_shapes
from coolchic.rangecoder import DecodeError


def _qweights(rng, scale=0.3):
    w = {k: rng.uniform(-scale, scale, s) for k, s in WEIGHT_SHAPES.items()}
    return quantize_weights(w, {k: -10 for k in WEIGHT_ORDER})


def _levels(rng, h, w, spread=3.0):
    out = []
    for sh in level_shapes(h, w):
        g = np.rint(rng.laplace(0, spread, sh)).astype(np.int64)
        out.append(g)
    return out


def _bounds(levels):
    return [(int(g.min()), int(g.max())) for g in levels]


@pytest.mark.parametrize("seed,h,w", [(0, 16, 16), (1, 13, 29), (2, 1, 7), (3, 33, 5)])
def test_latent_round_trip_serial_and_parallel(seed, h, w):
    rng = np.random.default_rng(seed)
    q = _qweights(rng)
    levels = _levels(rng, h, w)
    bounds = _bounds(levels)
    streams = encode_latents(levels, bounds, q)
    serial = decode_latents(streams, h, w, bounds, q)
    parallel = decode_latents(streams, h, w, bounds, q, parallel=True)
    for a, b, c in zip(levels, serial, parallel):
        assert np.array_equal(a, b) and np.array_equal(b, c)


def test_constant_level_costs_nothing():
    rng = np.random.default_rng(4)
    q = _qweights(rng)
    grid = np.full((8, 8), -3, dtype=np.int64)
    stream = encode_level(grid, (-3, -3), q)
    assert len(stream) <= 4
    assert np.array_equal(decode_level(stream, (8, 8), (-3, -3), q), grid)


def test_full_bitstream_decode_matches():
    rng = np.random.default_rng(5)
    q = _qweights(rng)
    h, w = 20, 24
    levels = _levels(rng, h, w, spread=1.0)
    bounds = _bounds(levels)
    data = write_bitstream(Header(h, w, bounds, dict(q.exponents), []), q, encode_latents(levels, bounds, q))
    a = decode_bitstream(data)
    b = decode_bitstream(data, parallel=True)
    assert a.image.shape == (3, h, w)
    assert np.array_equal(a.image, b.image)
    assert all(np.array_equal(x, y) for x, y in zip(a.levels, levels))
    assert a.image.min() >= 0 and a.image.max() <= 1


def test_corrupted_payload_is_a_clean_error():
    rng = np.random.default_rng(6)
    q = _qweights(rng)
    h, w = 16, 16
    levels = _levels(rng, h, w, spread=6.0)
    bounds = _bounds(levels)
    data = write_bitstream(Header(h, w, bounds, dict(q.exponents), []), q, encode_latents(levels, bounds, q))
    failures = 0
    for cut in range(1, 40):
        try:
            decode_bitstream(data[:-cut])
        except (ParseError, DecodeError):
            failures += 1
    assert failures == 39
