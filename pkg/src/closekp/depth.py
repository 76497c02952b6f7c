"""Millimeter depth rasters: 16-bit binary PGM and 16-bit grayscale PNG.

A depth frame stores unsigned 16-bit millimeters, row-major, with 0 as the
"no measurement" sentinel.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

INVALID = 0


@dataclass(frozen=True, eq=False)
class DepthFrame:
    values: np.ndarray  # (height, width) uint16 millimeters

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"depth frame must be a non-empty 2D raster, got shape {arr.shape}")
        if arr.dtype != np.uint16:
            if np.any(arr < 0) or np.any(arr > 65535):
                raise ValidationError("depth values must fit in uint16")
            arr = arr.astype(np.uint16)
        arr = np.array(arr, dtype=np.uint16, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def meters(self) -> np.ndarray:
        return self.values.astype(np.float64) / 1000.0

    def __eq__(self, other):
        if not isinstance(other, DepthFrame):
            return NotImplemented
        return np.array_equal(self.values, other.values)


def _pgm_header(data: bytes):
    """Return ([magic, width, height, maxval], data offset)."""
    fields, pos, n = [], 0, len(data)
    while len(fields) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", pos)
        fields.append((data[start:pos], start))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ParseError("PGM header must end with one whitespace byte", pos)
    return fields, pos + 1


def decode_pgm(data: bytes) -> DepthFrame:
    fields, offset = _pgm_header(data)
    (magic, _), *nums = fields
    if magic != b"P5":
        raise ParseError(f"not a binary PGM (magic {magic[:4]!r})", 0)
    vals = []
    for tok, at in nums:
        if not tok.isdigit():
            raise ParseError(f"bad PGM header field {tok[:16]!r}", at)
        vals.append(int(tok))
    width, height, maxval = vals
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ParseError(f"bad PGM geometry {width}x{height} maxval {maxval}", nums[0][1])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) - offset < need:
        raise ParseError(f"PGM raster truncated: need {need} bytes", len(data))
    raster = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset)
    return DepthFrame(raster.reshape(height, width).astype(np.uint16))


def encode_pgm(frame: DepthFrame) -> bytes:
    header = f"P5\n{frame.width} {frame.height}\n65535\n".encode("ascii")
    return header + frame.values.astype(">u2").tobytes()


def read_depth(path) -> DepthFrame:
    """Load a ``.pgm`` (P5) or 16-bit ``.png`` depth raster in millimeters."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        return decode_pgm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("I;16", "I;16B", "I", "L"):
                raise ParseError(f"{path.name}: expected a grayscale PNG, got mode {im.mode}")
            arr = np.asarray(im)
        if arr.ndim != 2:
            raise ParseError(f"{path.name}: expected a single-channel raster")
        return DepthFrame(arr.astype(np.int64))
    raise ParseError(f"{path.name}: unsupported depth format", 0)


def write_depth(path, frame: DepthFrame) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        path.write_bytes(encode_pgm(frame))
        return
    from PIL import Image

    Image.fromarray(frame.values.astype(np.uint16)).save(path, format="PNG")
