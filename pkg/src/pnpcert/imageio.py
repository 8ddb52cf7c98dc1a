"""Binary PGM (P5) and grayscale PFM (Pf) reading and writing."""
from __future__ import annotations

import re

import numpy as np

from .linops import Signal


class ImageFormatError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf, count):
    """Return ``count`` whitespace-separated header tokens and the offset after them.

    Comments (``#`` to end of line) are skipped; exactly one whitespace byte
    separates the last token from the raster.
    """
    pos, tokens = 0, []
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise ImageFormatError("malformed header")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("malformed header: missing separator before raster")
    return tokens, pos + 1


def load_pgm(path):
    """Read a P5 PGM; samples are divided by maxval, so the peak is 1.0.

    16-bit files (maxval > 255) are read as big-endian.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, offset = _header_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("non-integer PGM header field") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError("invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    size = width * height * dtype.itemsize
    raster = buf[offset:offset + size]
    if len(raster) < size:
        raise ImageFormatError(f"truncated raster: {len(raster)} of {size} bytes")
    img = np.frombuffer(raster, dtype=dtype).astype(np.float64).reshape(height, width)
    return Signal.from_image(img / maxval, peak=1.0)


def save_pgm(signal, path, maxval=255):
    """Write a P5 PGM, quantizing [0, peak] to [0, maxval] with rounding."""
    if not 0 < maxval < 65536:
        raise ImageFormatError("maxval must lie in 1..65535")
    img = signal.image()
    q = np.rint(np.clip(img / signal.peak, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def load_pfm(path):
    """Read a grayscale PFM; |scale| becomes the Signal peak."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, offset = _header_tokens(buf, 4)
    if tokens[0] != b"Pf":
        raise ImageFormatError(f"not a grayscale PFM (magic {tokens[0]!r})")
    try:
        width, height = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise ImageFormatError("bad PFM header field") from exc
    if width < 1 or height < 1 or scale == 0 or not np.isfinite(scale):
        raise ImageFormatError("invalid PFM dimensions or scale")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    size = width * height * 4
    raster = buf[offset:offset + size]
    if len(raster) < size:
        raise ImageFormatError(f"truncated raster: {len(raster)} of {size} bytes")
    # PFM rows run bottom to top.
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width)[::-1]
    return Signal.from_image(img.astype(np.float64), peak=abs(scale))


def save_pfm(signal, path):
    """Write a little-endian grayscale PFM with scale -peak.

    Exact for signals whose entries are representable in float32.
    """
    img = signal.image()
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{width} {height}\n{-float(signal.peak)!r}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())
