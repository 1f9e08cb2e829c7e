"""Rescaling images and their boxes by a scale factor.

Resampling is bilinear with half-pixel centres: output pixel ``x`` samples
source coordinate ``(x + 0.5) * W_in / W_out - 0.5``, clamped to the image.
Samples are rounded half away from zero, so results are bit-exact and
identical between the compiled and numpy backends.

PNM layout (read and written): ASCII magic ``P5`` (gray) or ``P6`` (RGB),
whitespace, width, whitespace, height, whitespace, maxval ``255``, one
whitespace byte, then ``height * width * channels`` bytes in row-major order.
Comment lines starting with ``#`` are accepted in the header on read.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import kernels
from .core import DomainError

MAX_PHI = 10.0


@dataclass
class RasterImage:
    width: int
    height: int
    channels: int
    data: np.ndarray  # uint8, shape (height, width, channels)

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8).reshape(
            self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(arr.shape[1], arr.shape[0], arr.shape[2], arr)


def output_size(width, height, phi):
    return math.floor(phi * width), math.floor(phi * height)


def rescale(img: RasterImage, phi: float, backend=None) -> RasterImage:
    if not (0.0 < phi <= MAX_PHI) or not math.isfinite(phi):
        raise DomainError(f"phi must lie in (0, {MAX_PHI}], got {phi}")
    out_w, out_h = output_size(img.width, img.height, phi)
    if out_w < 1 or out_h < 1:
        raise DomainError(f"phi={phi} gives an empty {out_w}x{out_h} image")
    k = kernels if backend is None else backend
    out = k.resize_bilinear(img.data, out_h, out_w)
    return RasterImage(out_w, out_h, img.channels, out)


def rescale_boxes(boxes, phi):
    """Multiply ``[x, y, w, h]`` boxes by ``phi``; areas scale by phi squared."""
    b = np.asarray(boxes, dtype=np.float64)
    return b * phi


def _header_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def decode_pnm(buf: bytes) -> RasterImage:
    (magic, w, h, maxval), pos = _header_tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    if int(maxval) != 255:
        raise ValueError("only maxval 255 is supported")
    width, height = int(w), int(h)
    ch = 1 if magic == b"P5" else 3
    n = width * height * ch
    body = buf[pos:pos + n]
    if len(body) != n:
        raise ValueError(f"expected {n} sample bytes, found {len(body)}")
    return RasterImage(width, height, ch, np.frombuffer(body, dtype=np.uint8))


def encode_pnm(img: RasterImage) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + img.data.tobytes()


def read_pnm(path) -> RasterImage:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_pnm(path, img: RasterImage):
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))
