from pathlib import Path

import numpy as np
import pytest

from coolchic.bitstream import header_size, decoder_weight_bytes
from coolchic.codec import decode_bitstream
from coolchic.imageio import read_image
from coolchic.metrics import to_uint8, to_unit
from coolchic.tensor import Tape, Tensor
from coolchic.trainer import (
    TrainConfig,
    TrainingError,
    cosine_lr,
    encode_image,
    init_model,
    loss,
    sweep,
)


def smooth_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    chans = [0.5 + 0.3 * np.sin(2 * np.pi * (rng.uniform(0.5, 2) * xx + rng.uniform(0.5, 2) * yy)) for _ in range(3)]
    return np.clip(np.stack(chans) + rng.normal(0, 0.02, (3, h, w)), 0, 1)


def test_lambda_zero_loss_is_distortion():
    x = Tensor(smooth_image(32, 32).astype(np.float32))
    m = init_model(32, 32, seed=1)
    with Tape():
        j, d, bits = loss(x, m.pyramid, m.synthesis, m.arm, 0.0, "hard")
    assert float(j.data) == float(d.data)
    assert float(bits.data) > 0


def test_loss_combines_rate():
    x = Tensor(smooth_image(32, 40).astype(np.float32))
    m = init_model(32, 40, seed=2)
    j, d, bits = loss(x, m.pyramid, m.synthesis, m.arm, 0.5, "hard")
    assert float(j.data) == pytest.approx(float(d.data) + 0.5 * float(bits.data) / (32 * 40), rel=1e-5)


def test_loss_gradient_reaches_every_parameter():
    x = Tensor(smooth_image(32, 32).astype(np.float32))
    m = init_model(32, 32, seed=3)
    params = m.parameters()
    with Tape() as tape:
        j, _, _ = loss(x, m.pyramid, m.synthesis, m.arm, 1e-2, "noise", np.random.default_rng(0))
    tape.backward(j)
    assert all(p.grad is not None and np.all(np.isfinite(p.grad)) for p in params)
    assert np.any(params[0].grad != 0)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-2, 1e-5) == pytest.approx(1e-2)
    assert cosine_lr(100, 100, 1e-2, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-2, 0.0) == pytest.approx(5e-3)


def test_config_validation_and_text():
    with pytest.raises(ValueError):
        TrainConfig(lmbda=0)
    with pytest.raises(ValueError):
        TrainConfig(noise_fraction=1.0)
    cfg = TrainConfig.from_text("# sweep point\nlambda = 0.02\niterations=50\nseed = 7\n", seed=None)
    assert (cfg.lmbda, cfg.iterations, cfg.seed) == (0.02, 50, 7)
    assert TrainConfig.from_text("seed=7", seed=3).seed == 3
    with pytest.raises(ValueError, match="line 2"):
        TrainConfig.from_text("seed=1\nbogus=2")
    with pytest.raises(ValueError, match="line 1"):
        TrainConfig.from_text("lambda 0.1")


def natural_crop():
    img = read_image(Path(__file__).parent / "data" / "chelsea_256.ppm")
    return to_unit(img)[:, 64:128, 96:160]


def test_encode_smoke_64_and_determinism():
    x = natural_crop()
    cfg = TrainConfig(lmbda=1e-3, iterations=120, seed=5)
    a = encode_image(x, cfg)
    b = encode_image(x, cfg)
    assert a.bitstream == b.bitstream
    dec = decode_bitstream(a.bitstream)
    assert np.array_equal(dec.image, a.decoded)
    assert a.psnr_db > 20
    assert abs(a.estimated_bits / a.latent_bits - 1) < 0.05
    assert a.bytes >= header_size() + decoder_weight_bytes()


def test_uint8_input_accepted():
    x8 = to_uint8(smooth_image(40, 24))
    r = encode_image(x8, TrainConfig(lmbda=1e-2, iterations=30, seed=0))
    assert (r.height, r.width) == (40, 24)


def test_constant_gray_is_small():
    x = np.full((3, 64, 64), 0.5)
    r = encode_image(x, TrainConfig(lmbda=0.02, iterations=200, seed=0))
    assert r.bytes < 6 * 1024
    assert r.psnr_db > 30


def test_sweep_orders_points():
    x = smooth_image(48, 48, seed=4)
    pts = sweep(x, [1e-1, 1e-3], TrainConfig(iterations=60, seed=0), image_id="s")
    assert [p.image for p in pts] == ["s", "s"]
    assert pts[0].bytes <= pts[1].bytes
    assert pts[0].lmbda == 1e-1
    with pytest.raises(ValueError):
        sweep(x, [], TrainConfig())


def test_warm_started_sweep():
    x = smooth_image(48, 48, seed=6)
    cfg = TrainConfig(iterations=30, seed=0)
    a = sweep(x, [3e-2, 3e-3], cfg, warm_start=40)
    b = sweep(x, [3e-2, 3e-3], cfg, warm_start=40)
    assert [p.bytes for p in a] == [p.bytes for p in b]
    assert a[0].lmbda == 3e-2


def test_warm_start_size_mismatch():
    from coolchic.trainer import train

    model, _ = train(smooth_image(32, 32), TrainConfig(iterations=2))
    with pytest.raises(ValueError, match="different image size"):
        train(smooth_image(32, 40), TrainConfig(iterations=2), init=model)


def test_persistent_divergence_raises(monkeypatch):
    import coolchic.trainer as tr

    def boom(*args, **kwargs):
        raise FloatingPointError("nan")

    monkeypatch.setattr(tr, "_train_once", boom)
    with pytest.raises(TrainingError, match="diverged"):
        tr.train(smooth_image(16, 16), TrainConfig(max_restarts=1))
