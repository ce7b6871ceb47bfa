"""Binary PPM (P6) and PGM (P5) reading and writing, plus depth encoding."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEPTH_SCALE = 256.0  # PGM units per meter
_WHITESPACE = b" \t\r\n\v\f"


class NetpbmError(ValueError):
    """Malformed or unsupported Netpbm file."""


def _parse_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset)."""
    if data[:2] != magic:
        raise NetpbmError(f"expected {magic.decode()} magic, got {data[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos] in _WHITESPACE:
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError("truncated or malformed header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise NetpbmError("missing whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise NetpbmError(f"invalid header values {fields}")
    return width, height, maxval, pos + 1


def _payload(data: bytes, offset: int, count: int, maxval: int) -> np.ndarray:
    dtype = ">u1" if maxval < 256 else ">u2"
    nbytes = count * np.dtype(dtype).itemsize
    if len(data) - offset < nbytes:
        raise NetpbmError(f"payload has {len(data) - offset} bytes, expected {nbytes}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset)


def read_ppm(path: str | Path) -> np.ndarray:
    """P6 image as float64 [H, W, 3] scaled to [0, 1]."""
    data = Path(path).read_bytes()
    w, h, maxval, off = _parse_header(data, b"P6")
    if maxval > 255:
        raise NetpbmError("only 8-bit PPM images are supported")
    px = _payload(data, off, w * h * 3, maxval).reshape(h, w, 3)
    return px.astype(np.float64) / maxval


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a [H, W, 3] float image in [0, 1] as 8-bit P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise NetpbmError(f"expected [H, W, 3], got {image.shape}")
    px = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = px.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """P5 image as an unsigned integer array [H, W] (8- or 16-bit)."""
    data = Path(path).read_bytes()
    w, h, maxval, off = _parse_header(data, b"P5")
    px = _payload(data, off, w * h, maxval).reshape(h, w)
    return px.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm16(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise NetpbmError(f"expected [H, W], got {values.shape}")
    h, w = values.shape
    body = values.astype(">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + body)


def encode_depth(depth: np.ndarray) -> np.ndarray:
    """Meters to 16-bit units (256 per meter); 0 stays 0 (invalid), overflow saturates."""
    units = np.round(np.asarray(depth, dtype=np.float64) * DEPTH_SCALE)
    if np.any(units > 65535):
        log.warning("depth beyond %.2f m saturated at 65535", 65535 / DEPTH_SCALE)
    return np.clip(units, 0, 65535).astype(np.uint16)


def decode_depth(units: np.ndarray) -> np.ndarray:
    return np.asarray(units, dtype=np.float64) / DEPTH_SCALE


def write_depth_pgm(path: str | Path, depth: np.ndarray) -> None:
    write_pgm16(path, encode_depth(depth))


def read_depth_pgm(path: str | Path) -> np.ndarray:
    return decode_depth(read_pgm(path))
