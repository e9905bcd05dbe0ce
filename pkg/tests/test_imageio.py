import numpy as np
import pytest

from coolchic.imageio import ImageFormatError, decode_ppm, encode_ppm, read_image, write_image


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    path = tmp_path / "a.ppm"
    write_image(path, img)
    assert np.array_equal(read_image(path), img)
    assert path.read_bytes().startswith(b"P6\n7 5\n255\n")


def test_header_comments_and_pgm():
    data = b"P5\n# made by hand\n2 # width\n1\n255\n" + bytes([10, 200])
    img = decode_ppm(data)
    assert img.shape == (1, 2, 3)
    assert img[0, 1].tolist() == [200, 200, 200]


@pytest.mark.parametrize(
    "data,match",
    [
        (b"P3\n1 1\n255\n0 0 0", "magic"),
        (b"P6\n1 1\n65535\n" + bytes(6), "maxval"),
        (b"P6\n2 2\n255\n" + bytes(5), "pixel bytes"),
        (b"P6\n2", "truncated"),
        (b"P6\nx 2\n255\n", "bad header"),
        (b"P6\n0 2\n255\n", "dimensions"),
    ],
)
def test_malformed(data, match):
    with pytest.raises(ImageFormatError, match=match):
        decode_ppm(data)


def test_encode_rejects_wrong_type():
    with pytest.raises(ImageFormatError):
        encode_ppm(np.zeros((2, 2, 3), dtype=np.float32))
