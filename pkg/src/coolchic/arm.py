"""Autoregressive probability model over latent grids.

Each latent is predicted from its 24 nearest causal neighbours (raster
order, same level only) by a 24-24-24-2 MLP producing a Laplace mean and
log-scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .tensor import Tensor, causal_context, concat, laplace_rate_bits, linear, pointwise

CONTEXT_SIZE = 24
LOG_SCALE_MIN = -8.0
LOG_SCALE_MAX = 8.0
PROB_FLOOR = 2.0**-16

# fractional bits of the integer ARM used for entropy coding
FIXED_FRAC_BITS = 8


def build_template(size=CONTEXT_SIZE):
    """The ``size`` causal offsets closest to the origin.

    Ordered by squared distance, then dy descending, then dx ascending.
    """
    radius = math.isqrt(size) + 2
    cands = [
        (dy, dx)
        for dy in range(-radius, 1)
        for dx in range(-radius, radius + 1)
        if dy < 0 or (dy == 0 and dx < 0)
    ]
    cands.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, -o[0], o[1]))
    return tuple(cands[:size])


TEMPLATE = build_template()


def extract_context(grid, y, x, template=TEMPLATE):
    """Context vector of position (y, x); out-of-bounds taps read 0."""
    grid = np.asarray(grid)
    h, w = grid.shape
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError(f"position {(y, x)} outside grid {grid.shape}")
    ctx = np.zeros(len(template), dtype=grid.dtype)
    for k, (dy, dx) in enumerate(template):
        yy, xx = y + dy, x + dx
        if 0 <= yy < h and 0 <= xx < w:
            ctx[k] = grid[yy, xx]
    return ctx


def context_matrix(grid, template=TEMPLATE):
    """All contexts of a 2-D integer grid at once, [h*w, 24] int64."""
    t = causal_context(Tensor(np.asarray(grid, dtype=np.float64)), template)
    return t.data.astype(np.int64)


@dataclass
class ArmParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    def tensors(self):
        return [getattr(self, f.name) for f in fields(self)]

    def names(self):
        return [f.name for f in fields(self)]

    def parameter_count(self):
        return sum(t.size for t in self.tensors())


ARM_SHAPES = {
    "w1": (CONTEXT_SIZE, CONTEXT_SIZE),
    "b1": (CONTEXT_SIZE,),
    "w2": (CONTEXT_SIZE, CONTEXT_SIZE),
    "b2": (CONTEXT_SIZE,),
    "w3": (CONTEXT_SIZE, 2),
    "b3": (2,),
}


def init_arm(rng=None, dtype=np.float32):
    rng = np.random.default_rng(rng)
    bound = np.sqrt(1.0 / CONTEXT_SIZE)

    def param(shape, fill=None):
        if fill is None:
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.full(shape, fill)
        return Tensor(data.astype(dtype), requires_grad=True)

    return ArmParams(
        w1=param((CONTEXT_SIZE, CONTEXT_SIZE)),
        b1=param((CONTEXT_SIZE,), 0.0),
        w2=param((CONTEXT_SIZE, CONTEXT_SIZE)),
        b2=param((CONTEXT_SIZE,), 0.0),
        w3=param((CONTEXT_SIZE, 2)),
        b3=param((2,), 0.0),
    )


def arm_from_arrays(arrays, dtype=np.float32, requires_grad=False):
    return ArmParams(
        **{
            name: Tensor(np.asarray(arrays[name], dtype=dtype).reshape(shape), requires_grad=requires_grad)
            for name, shape in ARM_SHAPES.items()
        }
    )


def arm_forward(contexts, params):
    """Batched ARM on a [N,24] tensor; returns (mu [N], raw log-scale [N])."""
    h = linear(contexts, params.w1, params.b1).relu()
    h = linear(h, params.w2, params.b2).relu()
    out = linear(h, params.w3, params.b3)
    return out[:, 0], out[:, 1]


def predict_params(context, params):
    """Mean and (positive) scale for a single context vector."""
    ctx = Tensor(np.asarray(context, dtype=params.w1.dtype).reshape(1, -1))
    mu, s = arm_forward(ctx, params)
    scale = math.exp(min(max(float(s.data[0]), LOG_SCALE_MIN), LOG_SCALE_MAX))
    return float(mu.data[0]), scale


def count_arm_macs():
    return CONTEXT_SIZE * CONTEXT_SIZE * 2 + CONTEXT_SIZE * 2


def arm_parameter_count():
    return sum(int(np.prod(s)) for s in ARM_SHAPES.values())


def _laplace_cdf(t, mu, scale):
    z = (t - mu) / scale
    if z < 0:
        return 0.5 * math.exp(z)
    return 1.0 - 0.5 * math.exp(-z)


def rate_bits(value, mu, scale):
    """Code length in bits of integer ``value`` under a discretized Laplace."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    p = _laplace_cdf(value + 0.5, mu, scale) - _laplace_cdf(value - 0.5, mu, scale)
    return -math.log2(max(p, PROB_FLOOR))


def bounded_level_bits(grid, params, vmin, vmax, template=TEMPLATE):
    """Estimated bits of one integer level when the coder's alphabet is ``vmin..vmax``.

    Like :func:`pyramid_rate` but with the Laplace tails folded into the two
    end symbols, as the range coder does. Not differentiable.
    """
    grid = Tensor(np.asarray(grid, dtype=np.float64))
    mu, s = arm_forward_cf(causal_context(grid, template, channels_first=True), params)
    v = grid.data.reshape(-1)
    mu = mu.data.astype(np.float64)
    scale = np.exp(np.clip(s.data.astype(np.float64), LOG_SCALE_MIN, LOG_SCALE_MAX))

    def cdf(t):
        z = (t - mu) / scale
        return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0)), 1 - 0.5 * np.exp(-np.maximum(z, 0)))

    upper = np.where(v >= vmax, 1.0, cdf(v + 0.5))
    lower = np.where(v <= vmin, 0.0, cdf(v - 0.5))
    return float(-np.log2(np.maximum(upper - lower, PROB_FLOOR)).sum())


def arm_forward_cf(contexts, params):
    """Channel-first ARM on a [24,N] tensor; same result as :func:`arm_forward`."""
    h = pointwise(contexts, params.w1, params.b1).relu()
    h = pointwise(h, params.w2, params.b2).relu()
    out = pointwise(h, params.w3, params.b3)
    return out[0], out[1]


def pyramid_rate(levels, params, template=TEMPLATE):
    """Total rate in bits of a list of latent level tensors (differentiable)."""
    ctxs = concat([causal_context(t, template, channels_first=True) for t in levels], axis=1)
    values = concat([t.reshape(-1) for t in levels], axis=0)
    mu, s = arm_forward_cf(ctxs, params)
    bits = laplace_rate_bits(values, mu, s, LOG_SCALE_MIN, LOG_SCALE_MAX)
    return bits.sum()


# integer ARM ---------------------------------------------------------------


def _round_shift(acc, shift):
    """Round-half-up division by 2**shift; works for numpy int64 and Python ints."""
    if shift <= 0:
        return acc * (1 << -shift)
    return (acc + (1 << (shift - 1))) >> shift


def arm_fixed(contexts, qweights, exponents):
    """Integer evaluation of the ARM.

    ``contexts`` are integer latents ([N,24] or [24]); ``qweights`` maps
    parameter names to int64 arrays and ``exponents`` to their power-of-two
    step exponents. Returns fixed-point (mu, log-scale) with
    ``FIXED_FRAC_BITS`` fractional bits, the log-scale clipped to
    [-8, 8]. All arithmetic is exact integer arithmetic, so batched and
    per-symbol evaluation agree everywhere.
    """
    f = FIXED_FRAC_BITS
    x = np.asarray(contexts, dtype=np.int64)
    frac_in = 0
    for layer in ("1", "2", "3"):
        w, b = qweights["w" + layer], qweights["b" + layer]
        ew, eb = exponents["w" + layer], exponents["b" + layer]
        acc = x @ w
        x = _round_shift(acc, frac_in - f - ew) + _round_shift(b, -f - eb)
        if layer != "3":
            x = np.maximum(x, 0)
        frac_in = f
    lo, hi = int(LOG_SCALE_MIN) << f, int(LOG_SCALE_MAX) << f
    return x[..., 0], np.clip(x[..., 1], lo, hi)


def fixed_to_float(mu_fixed, log_scale_fixed):
    one = float(1 << FIXED_FRAC_BITS)
    return mu_fixed / one, math.exp(log_scale_fixed / one)
