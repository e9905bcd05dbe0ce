import csv
import json

import numpy as np
import pytest

from coolchic.cli import EXIT_FAILURE, EXIT_IO, EXIT_OK, EXIT_PARSE, EXIT_TRAINING, EXIT_USAGE, main
from coolchic.imageio import read_image, write_image


@pytest.fixture
def gray_ppm(tmp_path):
    path = tmp_path / "gray.ppm"
    write_image(path, np.full((64, 64, 3), 128, dtype=np.uint8))
    return path


@pytest.fixture
def encoded(tmp_path, gray_ppm):
    out = tmp_path / "gray.cchc"
    assert main(["encode", "--input", str(gray_ppm), "--output", str(out), "--lambda", "0.02", "--iterations", "40", "--seed", "1"]) == EXIT_OK
    return out


def test_encode_decode_round_trip(tmp_path, encoded, capsys):
    assert encoded.stat().st_size < 6 * 1024
    rec = tmp_path / "rec.ppm"
    assert main(["decode", "--input", str(encoded), "--output", str(rec), "--json"]) == EXIT_OK
    out = capsys.readouterr().out.strip().splitlines()
    record = json.loads(out[-1])
    assert record["width"] == 64 and record["mac_per_pixel"] < 2300
    assert read_image(rec).shape == (64, 64, 3)
    rec2 = tmp_path / "rec2.ppm"
    assert main(["decode", "--input", str(encoded), "--output", str(rec2), "--parallel-levels"]) == EXIT_OK
    assert rec.read_bytes() == rec2.read_bytes()


def test_encode_prints_bpp(tmp_path, gray_ppm, capsys):
    out = tmp_path / "x.cchc"
    main(["encode", "--input", str(gray_ppm), "--output", str(out), "--lambda", "0.02", "--iterations", "5"])
    assert "bpp=" in capsys.readouterr().out


def test_seed_determinism_and_env(tmp_path, gray_ppm, monkeypatch):
    def run(name, *extra):
        out = tmp_path / name
        assert main(["encode", "--input", str(gray_ppm), "--output", str(out), "--lambda", "0.01", "--iterations", "15", *extra]) == 0
        return out.read_bytes()

    a = run("a.cchc", "--seed", "3")
    b = run("b.cchc", "--seed", "3")
    monkeypatch.setenv("COOLCHIC_SEED", "3")
    c = run("c.cchc")
    assert a == b == c
    monkeypatch.setenv("COOLCHIC_SEED", "nope")
    assert main(["encode", "--input", str(gray_ppm), "--output", str(tmp_path / "d"), "--lambda", "0.01"]) == EXIT_USAGE


def test_sweep_outputs_and_points(tmp_path, gray_ppm):
    points = tmp_path / "points.csv"
    args = ["encode", "--input", str(gray_ppm), "--output", str(tmp_path / "s_{lambda}.cchc"), "--iterations", "5"]
    assert main(args + ["--lambda", "0.1", "0.01", "--points", str(points)]) == EXIT_OK
    assert (tmp_path / "s_0.1.cchc").exists() and (tmp_path / "s_0.01.cchc").exists()
    rows = list(csv.DictReader(points.open()))
    assert [r["image"] for r in rows] == ["gray", "gray"]
    assert main(["allocate", "--points", str(points), "--budget", "100000"]) == EXIT_OK


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nothere.ppm"
    code = main(["encode", "--input", str(missing), "--output", str(tmp_path / "o"), "--lambda", "0.01"])
    assert code == EXIT_IO
    assert str(missing) in capsys.readouterr().err


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["encode", "--input", "x"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["profile", "--size", "64by64"])
    assert exc.value.code == EXIT_USAGE


def test_bad_config_is_usage_error(tmp_path, gray_ppm):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("speed = 9\n")
    code = main(["encode", "--input", str(gray_ppm), "--output", str(tmp_path / "o"), "--lambda", "0.01", "--config", str(cfg)])
    assert code == EXIT_USAGE


def test_training_failure_exit(tmp_path, gray_ppm, monkeypatch):
    import coolchic.cli as cli
    from coolchic.trainer import TrainingError

    def fail(*a, **k):
        raise TrainingError("diverged")

    monkeypatch.setattr(cli, "encode_image", fail)
    code = main(["encode", "--input", str(gray_ppm), "--output", str(tmp_path / "o"), "--lambda", "0.01"])
    assert code == EXIT_TRAINING


def test_corrupted_bitstream(tmp_path, encoded, capsys):
    bad = tmp_path / "bad.cchc"
    bad.write_bytes(encoded.read_bytes()[:50])
    assert main(["decode", "--input", str(bad), "--output", str(tmp_path / "r.ppm")]) == EXIT_PARSE
    assert "cannot decode" in capsys.readouterr().err
    bad.write_bytes(b"NOPE" + encoded.read_bytes()[4:])
    assert main(["decode", "--input", str(bad), "--output", str(tmp_path / "r.ppm")]) == EXIT_PARSE


def test_eval_report(tmp_path, gray_ppm, encoded, capsys):
    noisy = tmp_path / "noisy.ppm"
    img = read_image(gray_ppm).astype(int)
    img[::2, ::2] += 10
    write_image(noisy, img.astype(np.uint8))
    pairs = tmp_path / "pairs.csv"
    pairs.write_text(
        "image,original,reconstruction,bitstream\n"
        "same,gray.ppm,gray.ppm,\n"
        "noisy,gray.ppm,noisy.ppm,\n"
        "coded,gray.ppm,,gray.cchc\n"
    )
    vmaf = tmp_path / "vmaf.csv"
    vmaf.write_text("image,vmaf\nsame,100\n")
    report = tmp_path / "report.csv"
    assert main(["eval", "--pairs", str(pairs), "--output", str(report), "--vmaf", str(vmaf)]) == EXIT_OK
    rows = {r["image"]: r for r in csv.DictReader(report.open())}
    assert rows["same"]["psnr_db"] == "inf" and rows["same"]["ms_ssim"] == "1.000"
    assert rows["same"]["vmaf"] == "100.000" and rows["noisy"]["vmaf"] == ""
    assert float(rows["noisy"]["psnr_db"]) == pytest.approx(10 * np.log10(255**2 / 25), abs=1e-3)
    assert int(rows["coded"]["bytes"]) == encoded.stat().st_size
    assert float(rows["coded"]["bpp"]) == pytest.approx(8 * encoded.stat().st_size / 4096, abs=1e-4)


def test_eval_bad_pairs(tmp_path):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("image,original\na,x.ppm\n")
    assert main(["eval", "--pairs", str(pairs)]) != EXIT_OK
    assert main(["eval", "--pairs", str(tmp_path / "none.csv")]) == EXIT_IO


def test_allocate(tmp_path, capsys):
    points = tmp_path / "p.csv"
    points.write_text("image,bytes,quality\na,100,10\na,200,20\nb,100,10\nb,200,20\n")
    out = tmp_path / "alloc.csv"
    assert main(["allocate", "--points", str(points), "--budget", "300", "--output", str(out), "--json"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert record["total_bytes"] == 300 and record["min_quality"] == 10
    assert "total,300," in out.read_text()
    assert main(["allocate", "--points", str(points), "--budget", "150"]) == EXIT_FAILURE
    assert "shortfall 50 bytes" in capsys.readouterr().err
    points.write_text("image,bytes\n")
    assert main(["allocate", "--points", str(points), "--budget", "150"]) == EXIT_PARSE


def test_profile(tmp_path, encoded, capsys):
    assert main(["profile", "--size", "256x256", "--json"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert record["synthesis_per_pixel"] == 562
    assert abs(record["total_per_pixel"] - 2200) <= 220
    assert main(["profile", "--input", str(encoded)]) == EXIT_OK
    assert "bitstream bytes" in capsys.readouterr().out
