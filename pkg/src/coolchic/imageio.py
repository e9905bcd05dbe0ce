"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data, count, pos):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    return out, pos


def decode_ppm(data):
    """Parse P6/P5 bytes into an [H,W,3] uint8 array (grey images are replicated)."""
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"not a binary PPM/PGM file (magic {magic!r})")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"bad header field: {exc}") from None
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad dimensions {w}x{h}")
    channels = 3 if magic == b"P6" else 1
    pos += 1  # single whitespace byte after maxval
    need = w * h * channels
    pixels = data[pos : pos + need]
    if len(pixels) != need:
        raise ImageFormatError(f"expected {need} pixel bytes, found {len(pixels)}")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img.copy()


def encode_ppm(img):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected an [H,W,3] uint8 array, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def read_image(path):
    """Read a PPM/PGM file, or a PNG when Pillow is installed."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    return decode_ppm(data)


def write_image(path, img):
    path = str(path)
    if path.lower().endswith(".png"):
        _write_png(path, img)
        return
    with open(path, "wb") as f:
        f.write(encode_ppm(img))


def _read_png(path):
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - optional dependency
        raise ImageFormatError("PNG input requires Pillow") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def _write_png(path, img):
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - optional dependency
        raise ImageFormatError("PNG output requires Pillow") from None
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)
