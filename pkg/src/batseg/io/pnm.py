"""
    batseg.io.pnm
    ~~~~~~~~~~~~~

    8-bit binary PGM (P5) and PPM (P6) files.
"""

from __future__ import annotations

from os import PathLike
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from ..errors import FormatError


def _parse_header(data: bytes, path) -> tuple[bytes, int, int, int]:
    """Split a binary PNM file into (magic, width, height, raster offset)."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated header")
        tokens.append(data[start:pos])
    magic, *numbers = tokens
    try:
        width, height, maxval = map(int, numbers)
    except ValueError:
        raise FormatError(path, f"malformed header {tokens!r}")
    if maxval != 255:
        raise FormatError(path, f"only 8-bit files are supported, maxval={maxval}")
    # A single whitespace byte separates the header from the raster.
    return magic, width, height, pos + 1


def _read(path: str | PathLike, magic: bytes, channels: int) -> NDArray[np.uint8]:
    data = Path(path).read_bytes()
    found, width, height, offset = _parse_header(data, path)
    if found != magic:
        raise FormatError(path, f"expected {magic.decode()}, found {found!r}")
    raster = data[offset:]
    expected = width * height * channels
    if len(raster) != expected:
        raise FormatError(path, f"expected {expected} raster bytes, found {len(raster)}")
    shape = (height, width, channels) if channels > 1 else (height, width)
    return np.frombuffer(raster, dtype=np.uint8).reshape(shape).copy()


def _write(path: str | PathLike, raster: NDArray[np.uint8], magic: bytes):
    height, width = raster.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    Path(path).write_bytes(header + np.ascontiguousarray(raster).tobytes())


def to_bytes(values: NDArray) -> NDArray[np.uint8]:
    """[0, 1] values to 8-bit levels (×255, rounded)."""
    return np.round(np.clip(values, 0, 1) * 255).astype(np.uint8)


def read_mask(path: str | PathLike) -> NDArray[np.uint8]:
    """P5 mask; values >= 128 are lesion."""
    return (_read(path, b"P5", 1) >= 128).astype(np.uint8)


def write_mask(path: str | PathLike, mask: NDArray):
    _write(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8), b"P5")


def read_gray(path: str | PathLike) -> NDArray[np.float64]:
    """P5 file as values in [0, 1]."""
    return _read(path, b"P5", 1) / 255.0


def write_probability_map(path: str | PathLike, prob: NDArray):
    _write(path, to_bytes(prob), b"P5")


def read_image(path: str | PathLike) -> NDArray[np.float64]:
    """P6 file as an (H, W, 3) array in [0, 1]."""
    return _read(path, b"P6", 3) / 255.0


def write_image(path: str | PathLike, image: NDArray):
    _write(path, to_bytes(image), b"P6")
