"""Upsampling cascade and the 4-layer synthesis network."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .latents import NUM_LEVELS, level_shapes
from .tensor import DimensionError, Tensor, clamp, conv3x3, pointwise, stack, upsample2x

HIDDEN = 40
OUT_CHANNELS = 3

# 8-tap half-pel interpolation filter; each polyphase component sums to 0.5.
UPSAMPLE_TAPS = np.array([-0.0154, 0.0738, -0.1152, 0.5568, 0.5568, -0.1152, 0.0738, -0.0154])


@dataclass
class SynthesisParams:
    up_kernel: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    conv1: Tensor
    cb1: Tensor
    conv2: Tensor
    cb2: Tensor

    def tensors(self):
        return [getattr(self, f.name) for f in fields(self)]

    def names(self):
        return [f.name for f in fields(self)]

    def parameter_count(self):
        return sum(t.size for t in self.tensors())


SYNTHESIS_SHAPES = {
    "up_kernel": (8, 8),
    "w1": (NUM_LEVELS, HIDDEN),
    "b1": (HIDDEN,),
    "w2": (HIDDEN, OUT_CHANNELS),
    "b2": (OUT_CHANNELS,),
    "conv1": (OUT_CHANNELS, OUT_CHANNELS, 3, 3),
    "cb1": (OUT_CHANNELS,),
    "conv2": (OUT_CHANNELS, OUT_CHANNELS, 3, 3),
    "cb2": (OUT_CHANNELS,),
}


def initial_up_kernel():
    # The taps are doubled per axis so every output phase has unit DC gain.
    taps = 2.0 * UPSAMPLE_TAPS
    return np.outer(taps, taps)


def init_synthesis(rng=None, dtype=np.float32):
    """Fresh parameters: weights uniform in +-sqrt(1/fan_in), zero biases."""
    rng = np.random.default_rng(rng)

    def uniform(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return SynthesisParams(
        up_kernel=Tensor(initial_up_kernel().astype(dtype), requires_grad=True),
        w1=uniform((NUM_LEVELS, HIDDEN), NUM_LEVELS),
        b1=zeros((HIDDEN,)),
        w2=uniform((HIDDEN, OUT_CHANNELS), HIDDEN),
        b2=zeros((OUT_CHANNELS,)),
        conv1=uniform((OUT_CHANNELS, OUT_CHANNELS, 3, 3), OUT_CHANNELS * 9),
        cb1=zeros((OUT_CHANNELS,)),
        conv2=uniform((OUT_CHANNELS, OUT_CHANNELS, 3, 3), OUT_CHANNELS * 9),
        cb2=zeros((OUT_CHANNELS,)),
    )


def synthesis_from_arrays(arrays, dtype=np.float32, requires_grad=False):
    return SynthesisParams(
        **{
            name: Tensor(np.asarray(arrays[name], dtype=dtype).reshape(shape), requires_grad=requires_grad)
            for name, shape in SYNTHESIS_SHAPES.items()
        }
    )


def upsample_to_full(levels, up_kernel, height, width):
    """Bring every level to (height, width) and stack them as channels [7,H,W].

    Level ``i`` goes through the shared 2x upsampler ``i`` times, cropping to
    the next finer level's extents after each stage.
    """
    shapes = level_shapes(height, width, len(levels))
    got = [tuple(t.shape) for t in levels]
    if got != shapes:
        raise DimensionError(f"pyramid extents {got} do not match {(height, width)}")
    channels = []
    for i, t in enumerate(levels):
        for stage in range(i - 1, -1, -1):
            t = upsample2x(t, up_kernel, *shapes[stage])
        channels.append(t)
    return stack(channels, axis=0)


def synthesize(full_latents, params, training=False):
    """[7,H,W] latents to a [3,H,W] image in [0,1].

    ``training`` swaps the output clamp's gradient for the restoring
    surrogate; the forward values are identical.
    """
    c = full_latents.shape[0]
    if c != params.w1.shape[0]:
        raise DimensionError(f"synthesis expects {params.w1.shape[0]} latent channels, got {c}")
    x = pointwise(full_latents, params.w1, params.b1).relu()
    x = pointwise(x, params.w2, params.b2).relu()
    x = x + conv3x3(x, params.conv1, params.cb1).relu()
    x = x + conv3x3(x, params.conv2, params.cb2)
    return clamp(x, 0.0, 1.0, restoring=training)


def decode_image(levels, params, height, width, training=False):
    """Full decoder forward pass: pyramid levels (tensors) to image tensor."""
    return synthesize(upsample_to_full(levels, params.up_kernel, height, width), params, training)


# Fixed-order evaluation used on both sides of the bitstream. No BLAS calls:
# every accumulation runs in a stated order so encoder and decoder agree to the bit.


def _upsample_fixed(a, k, out_h, out_w):
    h, w = a.shape
    full = np.zeros((2 * h + 6, 2 * w + 6))
    for ky in range(8):
        for kx in range(8):
            full[ky : ky + 2 * h : 2, kx : kx + 2 * w : 2] += k[ky, kx] * a
    oy, ox = (2 * h + 6 - out_h) // 2, (2 * w + 6 - out_w) // 2
    return full[oy : oy + out_h, ox : ox + out_w].copy()


def _conv_fixed(x, k, b):
    cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.empty((k.shape[0], h, w))
    for o in range(k.shape[0]):
        acc = np.full((h, w), b[o])
        for c in range(cin):
            for dy in range(3):
                for dx in range(3):
                    acc += k[o, c, dy, dx] * xp[c, dy : dy + h, dx : dx + w]
        out[o] = acc
    return out


def _pointwise_fixed(x, wt, b):
    out = np.empty((wt.shape[1],) + x.shape[1:])
    for j in range(wt.shape[1]):
        acc = np.full(x.shape[1:], b[j])
        for i in range(wt.shape[0]):
            acc += wt[i, j] * x[i]
        out[j] = acc
    return out


def decode_image_fixed(int_levels, weights, height, width):
    """Deterministic float64 decode of integer latents with plain-array weights.

    ``weights`` maps synthesis parameter names to arrays. Returns a [3,H,W]
    float64 image in [0,1].
    """
    shapes = level_shapes(height, width, len(int_levels))
    k = np.asarray(weights["up_kernel"], dtype=np.float64)
    chans = []
    for i, lv in enumerate(int_levels):
        a = np.asarray(lv, dtype=np.float64)
        if a.shape != shapes[i]:
            raise DimensionError(f"level {i} has extents {a.shape}, expected {shapes[i]}")
        for stage in range(i - 1, -1, -1):
            a = _upsample_fixed(a, k, *shapes[stage])
        chans.append(a)
    x = np.stack(chans)
    w = {n: np.asarray(v, dtype=np.float64) for n, v in weights.items()}
    x = np.maximum(_pointwise_fixed(x, w["w1"], w["b1"]), 0.0)
    x = np.maximum(_pointwise_fixed(x, w["w2"], w["b2"]), 0.0)
    x = x + np.maximum(_conv_fixed(x, w["conv1"], w["cb1"]), 0.0)
    x = x + _conv_fixed(x, w["conv2"], w["cb2"])
    return np.clip(x, 0.0, 1.0)


# complexity accounting --------------------------------------------------------


def count_synthesis_macs():
    """Multiply-accumulates per pixel in the synthesis layers (upsampling excluded)."""
    return NUM_LEVELS * HIDDEN + HIDDEN * OUT_CHANNELS + 2 * OUT_CHANNELS * OUT_CHANNELS * 9


def count_upsampling_macs(height, width, levels=NUM_LEVELS):
    """Total upsampling MACs for an image: 16 polyphase taps per output sample per stage."""
    shapes = level_shapes(height, width, levels)
    total = 0
    for i in range(1, levels):
        for stage in range(i - 1, -1, -1):
            total += 16 * shapes[stage][0] * shapes[stage][1]
    return total


def synthesis_parameter_count():
    return sum(int(np.prod(s)) for s in SYNTHESIS_SHAPES.values())
