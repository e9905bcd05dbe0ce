"""Small reverse-mode autodiff over numpy arrays.

Only the operators the codec needs are provided. Graphs are define-by-run:
operations executed while a :class:`Tape` is active are appended to it, and
``Tape.backward`` replays them in reverse, adding vector-Jacobian products
into ``Tensor.grad``.

    with Tape() as tape:
        y = linear(x, w, b).relu().sum()
    tape.backward(y)
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "as_tensor",
    "linear",
    "pointwise",
    "conv3x3",
    "upsample2x",
    "stack",
    "concat",
    "clamp",
    "round_ste",
    "gaussian_filter_valid",
    "avg_pool2",
    "causal_context",
    "laplace_rate_bits",
    "RATE_PROB_FLOOR",
]

RATE_PROB_FLOOR = 2.0**-16

_TAPES: list["Tape"] = []


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        return _record(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        return _record(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return _record(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        out = a / b
        return _record(
            out,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * out / b, other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)
        a = self.data
        return _record(a**p, (self,), lambda g: (g * p * a ** (p - 1.0),))

    # unary ops --------------------------------------------------------------

    def relu(self):
        mask = self.data > 0
        return _record(np.maximum(self.data, 0), (self,), lambda g: (g * mask,))

    def exp(self):
        out = np.exp(self.data)
        return _record(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return _record(np.log(a), (self,), lambda g: (g / a,))

    # reductions and shape ---------------------------------------------------

    def sum(self, axis=None):
        shape = self.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _record(np.asarray(self.data.sum(axis=axis)), (self,), vjp)

    def mean(self, axis=None):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _record(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self):
        return _record(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, index):
        shape, dtype = self.shape, self.dtype

        basic = isinstance(index, (int, slice)) or (
            isinstance(index, tuple) and all(isinstance(i, (int, slice)) for i in index)
        )

        def vjp(g):
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return _record(self.data[index], (self,), vjp)


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, vjp):
        self.nodes.append((out, inputs, vjp))

    def backward(self, out, seed=None):
        """Propagate from ``out`` to every recorded input; grads accumulate."""
        if seed is None:
            seed = np.ones_like(out.data)
        out.grad = seed if out.grad is None else out.grad + seed
        for node_out, inputs, vjp in reversed(self.nodes):
            if node_out.grad is None:
                continue
            grads = vjp(node_out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                g = np.asarray(g, dtype=inp.dtype)
                # grads are never modified in place, so sharing arrays is safe
                inp.grad = g if inp.grad is None else inp.grad + g


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float64))


def _record(data, inputs, vjp):
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# layers ---------------------------------------------------------------------


def linear(x, weight, bias):
    """``x[N,Cin] @ weight[Cin,Cout] + bias[Cout]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply {weight.shape} to {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match {weight.shape}")
    a, w = x.data, weight.data
    return _record(
        a @ w + bias.data,
        (x, weight, bias),
        lambda g: (g @ w.T, a.T @ g, g.sum(axis=0)),
    )


def pointwise(x, weight, bias):
    """Channel-first linear map: ``x[Cin, ...]`` to ``[Cout, ...]`` by ``weight[Cin,Cout]``."""
    if x.data.ndim < 2 or weight.data.ndim != 2 or x.shape[0] != weight.shape[0]:
        raise DimensionError(f"pointwise: cannot apply {weight.shape} to {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"pointwise: bias {bias.shape} does not match {weight.shape}")
    c, rest = x.shape[0], x.shape[1:]
    a = x.data.reshape(c, -1)
    wt = weight.data
    out = (wt.T @ a + bias.data[:, None]).reshape((-1,) + rest)

    def vjp(g):
        g2 = g.reshape(g.shape[0], -1)
        return (wt @ g2).reshape(x.shape), a @ g2.T, g2.sum(axis=1)

    return _record(out, (x, weight, bias), vjp)


def conv3x3(x, kernel, bias):
    """Same-size 3x3 convolution with zero padding; ``x`` is [C,H,W]."""
    if x.data.ndim != 3 or kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3: bad shapes {x.shape}, {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"conv3x3: kernel expects {kernel.shape[1]} channels, got {x.shape[0]}")
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv3x3: bias {bias.shape} does not match {kernel.shape}")
    c, h, w = x.shape
    cout = kernel.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    # patches[c, dy, dx, :] = shifted channel c
    patches = np.empty((c, 3, 3, h * w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            patches[:, dy, dx] = xp[:, dy : dy + h, dx : dx + w].reshape(c, h * w)
    patches = patches.reshape(c * 9, h * w)
    k2 = kernel.data.reshape(cout, c * 9)
    out = (k2 @ patches + bias.data[:, None]).reshape(cout, h, w)

    def vjp(g):
        g2 = g.reshape(cout, h * w)
        gk = (g2 @ patches.T).reshape(kernel.shape)
        gp = (k2.T @ g2).reshape(c, 3, 3, h, w)
        gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gxp[:, dy : dy + h, dx : dx + w] += gp[:, dy, dx]
        return gxp[:, 1:-1, 1:-1], gk, g2.sum(axis=1)

    return _record(out, (x, kernel, bias), vjp)


def upsample2x(x, kernel, out_h=None, out_w=None):
    """Stride-2 transposed convolution by an 8x8 kernel, center-cropped.

    ``x`` is [1,h,w] (or [h,w]); the output has extents ``(out_h, out_w)``,
    which default to ``(2h, 2w)`` and may be one smaller for odd targets.
    """
    if kernel.shape != (8, 8):
        raise DimensionError(f"upsample2x: kernel must be 8x8, got {kernel.shape}")
    squeeze = x.data.ndim == 3
    if squeeze and x.shape[0] != 1:
        raise DimensionError(f"upsample2x: expected one channel, got {x.shape}")
    a = x.data[0] if squeeze else x.data
    if a.ndim != 2:
        raise DimensionError(f"upsample2x: bad input shape {x.shape}")
    h, w = a.shape
    out_h = 2 * h if out_h is None else out_h
    out_w = 2 * w if out_w is None else out_w
    if not (2 * h - 1 <= out_h <= 2 * h and 2 * w - 1 <= out_w <= 2 * w):
        raise DimensionError(f"upsample2x: cannot crop {(2 * h, 2 * w)} to {(out_h, out_w)}")
    full_h, full_w = 2 * h + 6, 2 * w + 6
    oy, ox = (full_h - out_h) // 2, (full_w - out_w) // 2
    # polyphase form: output phase (py, px) at (m, n) sums x[m - i, n - j] * K[2i + py, 2j + px]
    kr = _polyphase_kernel(kernel.data)
    xpad = np.pad(a, 3)
    win = np.lib.stride_tricks.sliding_window_view(xpad, (4, 4))
    phases = np.tensordot(win, kr, axes=([2, 3], [0, 1]))
    full = phases.transpose(0, 2, 1, 3).reshape(full_h, full_w)
    out = full[oy : oy + out_h, ox : ox + out_w]
    if squeeze:
        out = out[None]

    def vjp(g):
        gfull = np.zeros((full_h, full_w), dtype=a.dtype)
        gfull[oy : oy + out_h, ox : ox + out_w] = g[0] if squeeze else g
        gph = gfull.reshape(h + 3, 2, w + 3, 2).transpose(0, 2, 1, 3)
        gkr = np.tensordot(win, gph, axes=([0, 1], [0, 1]))
        gwin = np.tensordot(gph, kr, axes=([2, 3], [2, 3]))
        gpad = np.zeros_like(xpad)
        for i in range(4):
            for j in range(4):
                gpad[i : i + h + 3, j : j + w + 3] += gwin[:, :, i, j]
        ga = gpad[3:-3, 3:-3]
        return (ga[None] if squeeze else ga), _polyphase_kernel_adjoint(gkr)

    return _record(np.ascontiguousarray(out), (x, kernel), vjp)


def _polyphase_kernel(k):
    """[4,4,2,2] view with kr[i, j, py, px] = k[6 - 2i + py, 6 - 2j + px]."""
    return k.reshape(4, 2, 4, 2)[::-1, :, ::-1, :].transpose(0, 2, 1, 3)


def _polyphase_kernel_adjoint(gkr):
    return np.ascontiguousarray(gkr.transpose(0, 2, 1, 3)[::-1, :, ::-1, :]).reshape(8, 8)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def concat(tensors, axis=0):
    tensors = list(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def clamp(x, lo, hi, restoring=False):
    """Clip to [lo, hi]; zero gradient where clipped.

    With ``restoring`` the gradient also passes at clipped entries when a
    descent step would move them back towards the range. This is a training
    surrogate that keeps saturated outputs from freezing.
    """
    below, above = x.data < lo, x.data > hi
    inside = ~(below | above)
    if not restoring:
        return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))

    def vjp(g):
        return (g * (inside | (below & (g < 0)) | (above & (g > 0))),)

    return _record(np.clip(x.data, lo, hi), (x,), vjp)


def round_ste(x):
    """Round half away from zero forward, identity gradient backward."""
    return _record(round_half_away(x.data), (x,), lambda g: (g,))


def round_half_away(a):
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


def gaussian_filter_valid(x, taps):
    """Separable 'valid' filtering of the last two axes by symmetric 1-D ``taps``."""
    taps = np.asarray(taps, dtype=x.dtype)
    n = len(taps)
    a = x.data
    h, w = a.shape[-2:]
    if h < n or w < n:
        raise DimensionError(f"filter of {n} taps does not fit {a.shape[-2:]}")
    c = n // 2
    ho, wo = h - n + 1, w - n + 1
    rows = correlate1d(a, taps, axis=-2, mode="constant")[..., c : c + ho, :]
    out = correlate1d(rows, taps, axis=-1, mode="constant")[..., :, c : c + wo]

    def vjp(g):
        # adjoint of a valid correlation: embed in zeros, correlate with the flipped taps
        gz = np.zeros(rows.shape, dtype=g.dtype)
        gz[..., :, c : c + wo] = g
        grows = correlate1d(gz, taps[::-1], axis=-1, mode="constant")
        ga = np.zeros(a.shape, dtype=g.dtype)
        ga[..., c : c + ho, :] = grows
        return (correlate1d(ga, taps[::-1], axis=-2, mode="constant"),)

    return _record(out, (x,), vjp)


def avg_pool2(x):
    """2x2 average pooling over the last two axes; an odd trailing row/column is dropped."""
    a = x.data
    h, w = a.shape[-2:]
    h2, w2 = h // 2, w // 2
    c = a[..., : 2 * h2, : 2 * w2]
    out = 0.25 * (c[..., 0::2, 0::2] + c[..., 1::2, 0::2] + c[..., 0::2, 1::2] + c[..., 1::2, 1::2])

    def vjp(g):
        ga = np.zeros_like(a)
        q = 0.25 * g
        for dy in (0, 1):
            for dx in (0, 1):
                ga[..., dy : 2 * h2 : 2, dx : 2 * w2 : 2] = q
        return (ga,)

    return _record(out, (x,), vjp)


def causal_context(grid, offsets, channels_first=False):
    """Gather ``[h*w, len(offsets)]`` neighbour values of a 2-D grid (zero outside).

    With ``channels_first`` the result is transposed to ``[len(offsets), h*w]``.
    """
    a = grid.data
    if a.ndim != 2:
        raise DimensionError(f"causal_context expects a 2-D grid, got {a.shape}")
    h, w = a.shape
    py = max(-dy for dy, _ in offsets)
    px = max(abs(dx) for _, dx in offsets)
    padded = np.zeros((h + py, w + 2 * px), dtype=a.dtype)
    padded[py:, px : px + w] = a
    cols = [padded[py + dy : py + dy + h, px + dx : px + dx + w].reshape(-1) for dy, dx in offsets]
    out = np.stack(cols, axis=0 if channels_first else 1)

    def vjp(g):
        if not channels_first:
            g = g.T
        gp = np.zeros_like(padded)
        for k, (dy, dx) in enumerate(offsets):
            gp[py + dy : py + dy + h, px + dx : px + dx + w] += g[k].reshape(h, w)
        return (gp[py:, px : px + w],)

    return _record(out, (grid,), vjp)


def laplace_rate_bits(value, mu, log_scale, lo=-8.0, hi=8.0):
    """Per-element code length in bits of integers under a discretized Laplace.

    The probability of ``value`` is the Laplace(mu, b) mass on
    ``[value - 0.5, value + 0.5]`` with ``b = exp(clip(log_scale, lo, hi))``,
    floored at 2**-16.
    """
    v, m, s = value.data, mu.data, log_scale.data
    s_clip = np.clip(s, lo, hi)
    b = np.exp(s_clip)
    diff = v - m
    d = np.abs(diff)
    far = d >= 0.5
    # far side: p = 0.5 * exp(-(d - 0.5)/b) * (1 - exp(-1/b))
    e1 = np.exp(-1.0 / b)
    one_minus_e1 = -np.expm1(-1.0 / b)
    ef = np.exp(-np.maximum(d - 0.5, 0.0) / b)
    p_far = 0.5 * ef * one_minus_e1
    # near side: p = 1 - 0.5 * exp(-(0.5 - d)/b) - 0.5 * exp(-(0.5 + d)/b)
    ea = np.exp(-np.maximum(0.5 - d, 0.0) / b)
    eb = np.exp(-(0.5 + d) / b)
    p_near = 1.0 - 0.5 * ea - 0.5 * eb
    p = np.where(far, p_far, p_near)
    floored = p < RATE_PROB_FLOOR
    p_safe = np.maximum(p, RATE_PROB_FLOOR)
    bits = -np.log2(p_safe)

    def vjp(g):
        b2 = b * b
        dp_dd = np.where(far, -p_far / b, (-0.5 * ea + 0.5 * eb) / b)
        dp_db = np.where(
            far,
            p_far * ((d - 0.5) / b2 - e1 / (b2 * one_minus_e1)),
            -0.5 * ea * (0.5 - d) / b2 - 0.5 * eb * (0.5 + d) / b2,
        )
        scale = np.where(floored, 0.0, -g / (p_safe * np.log(2.0)))
        gd = scale * dp_dd
        sign = np.sign(diff)
        gs = scale * dp_db * b * ((s >= lo) & (s <= hi))
        return gd * sign, -gd * sign, gs

    return _record(bits.astype(value.dtype), (value, mu, log_scale), vjp)
