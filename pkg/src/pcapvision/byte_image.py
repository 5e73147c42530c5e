"""Raw capture bytes -> fixed-size byte-valued images.

A capture is never parsed: the file content is taken verbatim, laid out
row-major into a ``height x width`` grid, truncated when it is too long and
zero-filled when it is too short.  Encoding the bytes as hex and decoding each
hex pair back to decimal yields the original byte values, so that round trip
is skipped and the bytes are used directly.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidDimension, IoError, NotFound, Unsupported

DEFAULT_WIDTH = 1600
DEFAULT_HEIGHT = 1600


@dataclass(frozen=True)
class RawCapture:
    bytes: bytes
    source_path: str = ""

    @property
    def byte_len(self) -> int:
        return len(self.bytes)


@dataclass(frozen=True, eq=False)
class ByteImage:
    width: int
    height: int
    pixels: np.ndarray = field(repr=False)  # uint8, shape (height, width)
    source_len: int = 0
    truncated: bool = False

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ByteImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.source_len == other.source_len
            and self.truncated == other.truncated
            and np.array_equal(self.pixels, other.pixels)
        )


def load_capture(path: str | os.PathLike) -> RawCapture:
    p = Path(path)
    try:
        data = p.read_bytes()
    except FileNotFoundError as exc:
        raise NotFound(f"no such capture: {p}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {p}: {exc}") from exc
    return RawCapture(data, str(p))


def encode_image(
    capture: RawCapture | bytes,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
) -> ByteImage:
    if width < 1 or height < 1:
        raise InvalidDimension(f"image dimensions must be >= 1, got {width}x{height}")
    data = capture.bytes if isinstance(capture, RawCapture) else bytes(capture)
    cap = width * height
    n = min(len(data), cap)
    pixels = np.zeros(cap, dtype=np.uint8)
    pixels[:n] = np.frombuffer(data, dtype=np.uint8, count=n)
    return ByteImage(width, height, pixels.reshape(height, width), len(data), len(data) > cap)


def to_unit_tensor(image: ByteImage, dtype=np.float32) -> np.ndarray:
    """Pixel values scaled into [0, 1]; shape (height, width)."""
    return image.pixels.astype(dtype) / dtype(255.0)


def convert_file(path: str | os.PathLike, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> ByteImage:
    return encode_image(load_capture(path), width, height)


def write_pgm(image: ByteImage, path: str | os.PathLike) -> None:
    # truncated/source_len are not representable in PGM and are dropped
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*([^\s#]+)")


def read_pgm(path: str | os.PathLike) -> ByteImage:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise NotFound(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    tokens = []
    pos = 0
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic[:8]!r})")
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise Unsupported(f"{path}: only maxval 255 is supported, got {maxval}")
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing raster separator")
    body = raw[pos + 1 :]
    if len(body) != width * height:
        raise FormatError(f"{path}: expected {width * height} raster bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()
    return ByteImage(width, height, pixels, width * height, False)
