"""The encoder: per-image overfitting of latents and decoder networks.

Training minimizes ``D(x, x_hat) + lambda * R / (H*W)`` with Adam, first
under additive uniform noise and then with straight-through rounding. The
trained model is then hard-quantized, its weights are fixed-pointed, the
latents are range-coded and the bitstream is decoded again to check that
the receiver reconstructs exactly what the encoder expects.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import arm as arm_mod
from .allocator import RdPoint
from .bitstream import Header, WEIGHT_ORDER, quantize_weights, smallest_exponent, write_bitstream
from .codec import decode_bitstream, encode_latents
from .latents import clip_for_coding, init_pyramid, quantize
from .metrics import DEFAULT_ALPHA, MsSsimReference, distortion_tensor, ms_ssim, psnr, to_uint8, to_unit
from .synthesis import (
    decode_image,
    decode_image_fixed,
    init_synthesis,
    synthesis_from_arrays,
    synthesize,
    upsample_to_full,
)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

# mean termination cost of one range-coded stream beyond its ideal length
STREAM_END_BITS = 4.0

LAMBDA_PRESETS = (1e-4, 2e-4, 4e-4, 1e-3, 2e-3, 4e-3)


class TrainingError(RuntimeError):
    pass


class IntegrityError(RuntimeError):
    """The decoded bitstream differs from the encoder's own reconstruction."""


@dataclass
class TrainConfig:
    lmbda: float = 1e-3
    iterations: int = 10000
    lr_init: float = 1e-2
    lr_final: float = 1e-5
    noise_fraction: float = 0.8
    seed: int = 0
    exp_min: int = -14
    exp_max: int = -8
    alpha: float = DEFAULT_ALPHA
    max_restarts: int = 3
    latent_lr_scale: float = 3.0

    def __post_init__(self):
        if not self.lmbda > 0:
            raise ValueError(f"lambda must be positive, got {self.lmbda}")
        if not 0 < self.noise_fraction < 1:
            raise ValueError(f"noise fraction must be in (0, 1), got {self.noise_fraction}")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")

    @classmethod
    def from_text(cls, text, **overrides):
        """Parse ``key = value`` lines (``#`` comments allowed)."""
        kinds = {f.name: f.type for f in fields(cls)}
        aliases = {"lambda": "lmbda"}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            key = aliases.get(key, key).replace("-", "_")
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = int(val) if kinds[key] in ("int", int) else float(val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class Model:
    pyramid: object
    synthesis: object
    arm: object

    def parameters(self):
        return list(self.pyramid.levels) + self.synthesis.tensors() + self.arm.tensors()


def init_model(height, width, seed):
    rng = np.random.default_rng(seed)
    return Model(init_pyramid(height, width, rng), init_synthesis(rng), arm_mod.init_arm(rng))


def loss(x, pyramid, synthesis, arm_params, lmbda, mode, rng=None, alpha=DEFAULT_ALPHA, reference=None):
    """RD cost ``D + lambda * bits / (H*W)``; returns (J, D, bits) tensors.

    ``reference`` optionally carries precomputed MS-SSIM statistics of ``x``.
    """
    q = quantize(pyramid, mode, rng)
    xhat = decode_image(q.levels, synthesis, pyramid.height, pyramid.width, training=mode != "hard")
    d = distortion_tensor(x, xhat, alpha, reference)
    bits = arm_mod.pyramid_rate(q.levels, arm_params)
    if lmbda == 0:
        return d, d, bits
    return d + bits * (lmbda / (pyramid.height * pyramid.width)), d, bits


class Adam:
    """Adam with an optional per-parameter learning-rate multiplier."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, lr_scales=None):
        self.params = params
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v, k in zip(self.params, self.m, self.v, self.lr_scales):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (k * lr / c1 * m / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def cosine_lr(it, total, lr_init, lr_final):
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * it / max(total, 1)))


def train(x, config, callback=None, init=None):
    """Overfit a model to ``x`` ([3,H,W] in [0,1]); returns (model, loss history).

    ``init`` is an already trained :class:`Model` to continue from (it is
    copied, not modified).
    """
    lr_scale = 1.0
    for attempt in range(config.max_restarts + 1):
        try:
            return _train_once(x, config, lr_scale, callback, init)
        except FloatingPointError as exc:
            log.warning("training diverged (%s); restarting with learning rate x%.3g", exc, lr_scale / 2)
            lr_scale /= 2
    raise TrainingError(f"training diverged {config.max_restarts + 1} times (lambda={config.lmbda})")


def _train_once(x, config, lr_scale, callback, init=None):
    _, h, w = x.shape
    if init is not None:
        if (init.pyramid.height, init.pyramid.width) != (h, w):
            raise ValueError("warm-start model was trained on a different image size")
        model = copy.deepcopy(init)
    else:
        model = init_model(h, w, config.seed)
    noise_rng = np.random.default_rng([config.seed, 1])
    target = Tensor(np.asarray(x, dtype=np.float32))
    reference = MsSsimReference(target) if config.alpha > 0 else None
    params = model.parameters()
    n_lat = len(model.pyramid.levels)
    opt = Adam(params, lr_scales=[config.latent_lr_scale] * n_lat + [1.0] * (len(params) - n_lat))
    noise_iters = int(round(config.noise_fraction * config.iterations))
    history = []
    for it in range(config.iterations):
        mode = "noise" if it < noise_iters else "ste"
        with Tape() as tape:
            j, d, bits = loss(target, model.pyramid, model.synthesis, model.arm, config.lmbda, mode, noise_rng, config.alpha, reference)
        value = float(j.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        history.append(value)
        for p in params:
            p.zero_grad()
        tape.backward(j)
        opt.step(lr_scale * cosine_lr(it, config.iterations, config.lr_init, config.lr_final))
        if callback is not None:
            callback(it, value, float(d.data), float(bits.data))
    return model, history


# post-training quantization and emission --------------------------------------


def _float_weights(model):
    out = {}
    for name, t in zip(model.synthesis.names(), model.synthesis.tensors()):
        out["syn." + name] = t.data.astype(np.float64)
    for name, t in zip(model.arm.names(), model.arm.tensors()):
        out["arm." + name] = t.data.astype(np.float64)
    return out


def _group(deq, prefix):
    return {k[len(prefix) + 1 :]: v for k, v in deq.items() if k.startswith(prefix + ".")}


class _QuantizedEvaluator:
    """Distortion and rate of the hard-quantized model under trial weight steps.

    Synthesis weights only affect distortion and ARM weights only affect
    rate, so each half of J can be evaluated on its own.
    """

    def __init__(self, x, int_levels, alpha):
        self.x = Tensor(np.asarray(x, dtype=np.float64))
        self.h, self.w = int_levels[0].shape
        self.levels = [Tensor(np.asarray(a, dtype=np.float64)) for a in int_levels]
        self.alpha = alpha
        self.reference = MsSsimReference(self.x) if alpha > 0 else None
        self._upsampled = {}

    def distortion(self, qweights):
        syn = synthesis_from_arrays(qweights.dequantized_group("syn"), np.float64)
        # the upsampled latents only depend on the kernel's step
        key = qweights.exponents["syn.up_kernel"]
        if key not in self._upsampled:
            self._upsampled[key] = upsample_to_full(self.levels, syn.up_kernel, self.h, self.w)
        xhat = synthesize(self._upsampled[key], syn)
        return float(distortion_tensor(self.x, xhat, self.alpha, self.reference).data)

    def bits(self, qweights):
        armp = arm_mod.arm_from_arrays(qweights.dequantized_group("arm"), np.float64)
        return float(arm_mod.pyramid_rate(self.levels, armp).data)

    def payload_bits(self, qweights, bounds):
        """Expected size in bits of the coded latent streams.

        Each stream costs its estimated rate over the coded alphabet plus on
        average half a byte of termination; a constant level is a bare
        one-byte flush.
        """
        armp = arm_mod.arm_from_arrays(qweights.dequantized_group("arm"), np.float64)
        total = 0.0
        for lv, (lo, hi) in zip(self.levels, bounds):
            if lo == hi:
                total += 8.0
            else:
                total += arm_mod.bounded_level_bits(lv.data, armp, lo, hi) + STREAM_END_BITS
        return total

    def cost(self, qweights, lmbda):
        bits = self.bits(qweights)
        return self.distortion(qweights) + lmbda * bits / (self.h * self.w), bits


def _quantized_cost(x, int_levels, qweights, lmbda, alpha):
    """J of the hard-quantized model with dequantized weights, plus its rate in bits."""
    return _QuantizedEvaluator(x, int_levels, alpha).cost(qweights, lmbda)


def search_weight_steps(x, int_levels, weights, config, evaluator=None):
    """Per-tensor power-of-two step minimizing J, one tensor at a time."""
    ev = evaluator or _QuantizedEvaluator(x, int_levels, config.alpha)
    exps = {k: smallest_exponent(weights[k], config.exp_min, config.exp_max) for k in WEIGHT_ORDER}
    partial = {"syn": ev.distortion, "arm": ev.bits}
    best = {g: f(quantize_weights(weights, exps)) for g, f in partial.items()}
    for k in WEIGHT_ORDER:
        g = k.split(".", 1)[0]
        for e in range(exps[k] + 1, max(exps[k], config.exp_max) + 1):
            trial = dict(exps, **{k: e})
            v = partial[g](quantize_weights(weights, trial))
            if v < best[g]:
                best[g], exps = v, trial
    return quantize_weights(weights, exps)


@dataclass
class EncodeResult:
    bitstream: bytes
    decoded: np.ndarray  # [3,H,W] float in [0,1], as decoded from the bitstream
    height: int
    width: int
    lmbda: float
    psnr_db: float
    ms_ssim: float
    estimated_bits: float
    latent_bits: int
    history: list = field(default_factory=list, repr=False)

    @property
    def bytes(self):
        return len(self.bitstream)

    @property
    def bpp(self):
        return 8.0 * self.bytes / (self.height * self.width)

    @property
    def decoded_uint8(self):
        return to_uint8(self.decoded)

    def summary(self):
        return {
            "bytes": self.bytes,
            "bpp": round(self.bpp, 6),
            "psnr_db": round(self.psnr_db, 3),
            "ms_ssim": round(self.ms_ssim, 3),
            "lambda": self.lmbda,
            "estimated_latent_bits": round(self.estimated_bits, 1),
            "actual_latent_bits": self.latent_bits,
        }


def emit(x, model, config):
    """Quantize a trained model, write its bitstream and verify the round trip."""
    _, h, w = x.shape
    hard = quantize(model.pyramid, "hard")
    int_levels, bounds = clip_for_coding([t.data for t in hard.levels])
    ev = _QuantizedEvaluator(x, int_levels, config.alpha)
    qweights = search_weight_steps(x, int_levels, _float_weights(model), config, ev)
    est_bits = ev.payload_bits(qweights, bounds)
    streams = encode_latents(int_levels, bounds, qweights)
    header = Header(h, w, bounds, dict(qweights.exponents), [])
    data = write_bitstream(header, qweights, streams)

    expected = decode_image_fixed(int_levels, qweights.dequantized_group("syn"), h, w)
    decoded = decode_bitstream(data)
    if not all(np.array_equal(a, b) for a, b in zip(decoded.levels, int_levels)):
        raise IntegrityError("decoded latents differ from the encoded latents")
    if not np.array_equal(decoded.image, expected):
        raise IntegrityError("decoded image differs from the encoder reconstruction")
    return data, decoded.image, est_bits, 8 * sum(len(s) for s in streams)


def encode_image(x, config, callback=None, init=None):
    """Encode a [3,H,W] image in [0,1] (or an [H,W,3] uint8 array)."""
    x = _as_unit(x)
    model, history = train(x, config, callback, init)
    data, decoded, est_bits, latent_bits = emit(x, model, config)
    x8 = to_unit(to_uint8(x))
    rec8 = to_unit(to_uint8(decoded))
    return EncodeResult(
        bitstream=data,
        decoded=decoded,
        height=x.shape[1],
        width=x.shape[2],
        lmbda=config.lmbda,
        psnr_db=psnr(x8, rec8),
        ms_ssim=ms_ssim(x8, rec8),
        estimated_bits=est_bits,
        latent_bits=latent_bits,
        history=history,
    )


def sweep(x, lambdas, config, image_id="image", jobs=1, warm_start=0):
    """Encode at every lambda; RdPoints sorted by size (quality = MS-SSIM).

    With ``warm_start > 0`` a shared model is first trained for that many
    iterations at the geometric-mean lambda, and every operating point then
    fine-tunes a copy of it for ``config.iterations`` iterations.
    """
    x = _as_unit(x)
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("sweep needs at least one lambda")
    configs = [TrainConfig(**{**config.__dict__, "lmbda": lm}) for lm in lambdas]
    init = None
    if warm_start > 0:
        mid = math.exp(sum(math.log(lm) for lm in lambdas) / len(lambdas))
        init, _ = train(x, TrainConfig(**{**config.__dict__, "lmbda": mid, "iterations": warm_start}))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(encode_image, x, c, None, init) for c in configs]
            results = [_result_or_raise(f, c) for f, c in zip(futures, configs)]
    else:
        results = []
        for c in configs:
            try:
                results.append(encode_image(x, c, init=init))
            except Exception as exc:
                raise TrainingError(f"encode failed for lambda={c.lmbda}: {exc}") from exc
    points = [
        RdPoint(image_id, r.bytes, r.ms_ssim, lmbda=r.lmbda, psnr_db=r.psnr_db, ms_ssim=r.ms_ssim) for r in results
    ]
    return sorted(points, key=lambda p: (p.bytes, p.lmbda))


def _result_or_raise(future, config):
    try:
        return future.result()
    except Exception as exc:
        raise TrainingError(f"encode failed for lambda={config.lmbda}: {exc}") from exc


def _as_unit(x):
    a = np.asarray(x)
    if a.dtype == np.uint8:
        return to_unit(a)
    a = a.astype(np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected a [3,H,W] image, got {a.shape}")
    return a
