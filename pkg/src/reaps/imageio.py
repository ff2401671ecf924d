"""Binary netpbm I/O (P6 colour, P5 gray), 8-bit only."""

from __future__ import annotations

import os
import re

import numpy as np

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


class ImageFormatError(ValueError):
    pass


def _parse_header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise ImageFormatError(f"{path}: truncated netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed netpbm header {fields!r}") from exc
    if maxval < 1 or maxval > 255:
        raise ImageFormatError(f"{path}: only 8-bit images are supported (maxval={maxval})")
    return magic, width, height, maxval, pos + 1  # single whitespace byte before raster


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    got, width, height, maxval, start = _parse_header(buf, path)
    if got != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} image, found {got[:2]!r}")
    n = width * height * channels
    if len(buf) - start < n:
        raise ImageFormatError(f"{path}: raster shorter than {width}x{height}x{channels}")
    raster = np.frombuffer(buf, dtype=np.uint8, count=n, offset=start)
    shape = (height, width, channels) if channels > 1 else (height, width)
    img = raster.reshape(shape)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def read_ppm(path) -> np.ndarray:
    """``uint8 [H, W, 3]``."""
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """``uint8 [H, W]``."""
    return _read(path, b"P5", 1)


def _write(path, magic: str, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
    os.replace(tmp, path)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"write_ppm wants uint8 [H,W,3], got {rgb.dtype} {rgb.shape}")
    _write(path, "P6", rgb)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"write_pgm wants uint8 [H,W], got {gray.dtype} {gray.shape}")
    _write(path, "P5", gray)


def to_uint8(img_chw: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` floats in [0,1] to ``uint8 [H,W,3]``."""
    return np.clip(np.round(np.asarray(img_chw).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def scale_to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a flat map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
