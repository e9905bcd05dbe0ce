"""Independent reference implementations used by the tests.

Everything here is written directly from the definitions with explicit
loops, sharing no code with the package beyond plain numpy.
"""

import math

import numpy as np

from coolchic.tensor import Tape, Tensor

# finite differences -------------------------------------------------------------


def numeric_grad(f, arrays, index, eps=1e-4):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        plus = f(*base)
        flat[k] = old - eps
        minus = f(*base)
        flat[k] = old
        grad.reshape(-1)[k] = (plus - minus) / (2 * eps)
    return grad


def analytic_grads(build, arrays):
    """Gradients of ``build(*tensors)`` (a tensor) reduced against a fixed random seed vector."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*tensors)
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def gradient_error(build, arrays, eps=1e-4, seed=0):
    """Max relative error between analytic and numeric gradients of ``<w, build(...)>``.

    A random projection ``w`` turns any tensor-valued op into a scalar.
    """
    probe = build(*[Tensor(np.array(a, dtype=np.float64)) for a in arrays])
    w = np.random.default_rng(seed).uniform(-1, 1, size=probe.shape)

    def scalar_tensor(*ts):
        return (build(*ts) * Tensor(w)).sum()

    def scalar(*arrs):
        return float(scalar_tensor(*[Tensor(a) for a in arrs]).data)

    grads = analytic_grads(scalar_tensor, arrays)
    worst = 0.0
    for i, g in enumerate(grads):
        n = numeric_grad(scalar, arrays, i, eps)
        scale = max(np.max(np.abs(n)), np.max(np.abs(g)), 1e-8)
        worst = max(worst, float(np.max(np.abs(g - n)) / scale))
    return worst


# MS-SSIM ------------------------------------------------------------------------


def _window(size=11, sigma=1.5):
    g = [math.exp(-((i - size // 2) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    return np.array([[a * b for b in g] for a in g])


def _pool(img):
    h, w = img.shape[0] // 2, img.shape[1] // 2
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = (img[2 * i, 2 * j] + img[2 * i + 1, 2 * j] + img[2 * i, 2 * j + 1] + img[2 * i + 1, 2 * j + 1]) / 4
    return out


def _ssim_means(x, y, win):
    """Mean luminance and contrast-structure terms over all valid windows."""
    n = win.shape[0]
    c1, c2 = 0.01**2, 0.03**2
    rows, cols = x.shape[0] - n + 1, x.shape[1] - n + 1
    lum_sum = cs_sum = 0.0
    for i in range(rows):
        for j in range(cols):
            px = x[i : i + n, j : j + n]
            py = y[i : i + n, j : j + n]
            mx = float(np.sum(win * px))
            my = float(np.sum(win * py))
            vx = float(np.sum(win * px * px)) - mx * mx
            vy = float(np.sum(win * py * py)) - my * my
            cxy = float(np.sum(win * px * py)) - mx * my
            cs = (2 * cxy + c2) / (vx + vy + c2)
            lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
            cs_sum += cs
            lum_sum += lum * cs
    count = rows * cols
    return lum_sum / count, cs_sum / count


def ms_ssim_reference(x, y, weights=(0.0448, 0.2856, 0.3001, 0.2363, 0.1333)):
    """Scalar MS-SSIM of two [C,H,W] images in [0,1], averaged over channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    win = _window()
    h, w = x.shape[1:]
    scales = 0
    while min(h, w) >= 11 and scales < len(weights):
        scales += 1
        h, w = h // 2, w // 2
    wts = [v / sum(weights[:scales]) for v in weights[:scales]]
    per_channel = []
    for c in range(x.shape[0]):
        a, b = x[c], y[c]
        value = 1.0
        for s in range(scales):
            if s > 0:
                a, b = _pool(a), _pool(b)
            lum_cs, cs = _ssim_means(a, b, win)
            term = lum_cs if s == scales - 1 else cs
            value *= max(term, 1e-8) ** wts[s]
        per_channel.append(value)
    return sum(per_channel) / len(per_channel)


# synthesis ------------------------------------------------------------------------


def synthesize_reference(lat, p):
    """Straight-line per-pixel synthesis of [7,H,W] latents with float64 arrays ``p``."""
    c_in, h, w = lat.shape
    hid = p["w1"].shape[1]
    l2 = np.zeros((3, h, w))
    for y in range(h):
        for x in range(w):
            hidden = []
            for j in range(hid):
                s = p["b1"][j]
                for i in range(c_in):
                    s += lat[i, y, x] * p["w1"][i, j]
                hidden.append(max(s, 0.0))
            for o in range(3):
                s = p["b2"][o]
                for j in range(hid):
                    s += hidden[j] * p["w2"][j, o]
                l2[o, y, x] = max(s, 0.0)

    def conv(img, k, b):
        out = np.zeros_like(img)
        for o in range(3):
            for y in range(h):
                for x in range(w):
                    s = b[o]
                    for c in range(3):
                        for dy in range(3):
                            for dx in range(3):
                                yy, xx = y + dy - 1, x + dx - 1
                                if 0 <= yy < h and 0 <= xx < w:
                                    s += k[o, c, dy, dx] * img[c, yy, xx]
                    out[o, y, x] = s
        return out

    l3 = l2 + np.maximum(conv(l2, p["conv1"], p["cb1"]), 0.0)
    l4 = l3 + conv(l3, p["conv2"], p["cb2"])
    return np.clip(l4, 0.0, 1.0)


def transposed_conv_reference(a, k, out_h, out_w):
    """Stride-2 transposed convolution by definition, then a centred crop."""
    h, w = a.shape
    full = np.zeros((2 * h + 6, 2 * w + 6))
    for i in range(h):
        for j in range(w):
            for ky in range(8):
                for kx in range(8):
                    full[2 * i + ky, 2 * j + kx] += a[i, j] * k[ky, kx]
    oy, ox = (full.shape[0] - out_h) // 2, (full.shape[1] - out_w) // 2
    return full[oy : oy + out_h, ox : ox + out_w]


# context template -------------------------------------------------------------------


def brute_force_template(size=24):
    cands = []
    for dy in range(-5, 1):
        for dx in range(-5, 6):
            if dy < 0 or (dy == 0 and dx < 0):
                cands.append((dy * dy + dx * dx, -dy, dx, (dy, dx)))
    cands.sort()
    return tuple(c[3] for c in cands[:size])


# Laplace ------------------------------------------------------------------------------


def laplace_cdf(t, mu, b):
    z = (t - mu) / b
    return 0.5 * math.exp(z) if z < 0 else 1 - 0.5 * math.exp(-z)


def discrete_laplace_pmf(mu, b, lo, hi):
    """Bucket probabilities on [lo, hi] with the tails folded into the end buckets."""
    p = []
    for v in range(lo, hi + 1):
        left = 0.0 if v == lo else laplace_cdf(v - 0.5, mu, b)
        right = 1.0 if v == hi else laplace_cdf(v + 0.5, mu, b)
        p.append(right - left)
    return np.array(p)
