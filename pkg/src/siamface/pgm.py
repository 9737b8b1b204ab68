"""Binary PGM (P5) codec and bilinear resampling."""

from pathlib import Path

import numpy as np

from .errors import PGMParseError

_WHITESPACE = b" \t\r\n\v\f"


def _header_tokens(data, count, path):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos] in _WHITESPACE:
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PGMParseError("unterminated comment in header", path)
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMParseError("truncated header", path)
        tokens.append(data[start:pos])
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PGMParseError("header must end with a single whitespace byte", path)
    return tokens, pos + 1


def decode_pgm(data, path=None):
    """Decode binary PGM bytes into a (height, width) array scaled to [0, 1]."""
    if data[:2] != b"P5":
        raise PGMParseError(f"unsupported magic {data[:2]!r}, only binary P5 is accepted", path)
    (magic, w, h, maxval), offset = _header_tokens(data, 4, path)
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PGMParseError("non-numeric width/height/maxval", path) from None
    if width <= 0 or height <= 0:
        raise PGMParseError(f"invalid size {width}x{height}", path)
    if not 0 < maxval < 65536:
        raise PGMParseError(f"invalid maxval {maxval}", path)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    body = data[offset:offset + need]
    if len(body) < need:
        raise PGMParseError(f"expected {need} pixel bytes, found {len(body)}", path)
    pixels = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return (pixels.astype(np.float32) / np.float32(maxval)).clip(0.0, 1.0)


def read_pgm(path):
    path = Path(path)
    return decode_pgm(path.read_bytes(), path)


def encode_pgm(pixels):
    """Encode a [0, 1] float (or uint8) raster as 8-bit binary PGM."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"PGM raster must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def write_pgm(path, pixels):
    Path(path).write_bytes(encode_pgm(pixels))


def resize_bilinear(img, size):
    """Resample ``img`` to ``size`` = (height, width), corner-aligned.

    Output pixel (i, j) samples the source at
    y = i * (H_in - 1) / (H_out - 1), x = j * (W_in - 1) / (W_out - 1),
    so the four corner pixels map exactly onto the source corners, and the
    value is the bilinear blend of the four surrounding source pixels.
    """
    img = np.asarray(img, dtype=np.float32)
    h_out, w_out = size
    h_in, w_in = img.shape
    if (h_in, w_in) == (h_out, w_out):
        return img.copy()

    def axis(n_in, n_out):
        if n_out == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, max(n_in - 2, 0))
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (pos - lo).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = axis(h_in, h_out)
    x0, x1, fx = axis(w_in, w_out)
    # lerp form a + (b - a) * t keeps constant regions exactly constant
    a, b = img[y0][:, x0], img[y0][:, x1]
    top = a + (b - a) * fx
    c, d = img[y1][:, x0], img[y1][:, x1]
    bottom = c + (d - c) * fx
    out = top + (bottom - top) * fy[:, None]
    return out.astype(np.float32)
