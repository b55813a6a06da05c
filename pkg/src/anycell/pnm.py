"""Binary Netpbm I/O: P5 greyscale (8 or 16 bit) and P6 colour."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _header(magic: str, w: int, h: int, maxval: int) -> bytes:
    return f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")


def encode_pgm(image: np.ndarray) -> bytes:
    a = np.asarray(image)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {a.shape}")
    if a.dtype == np.uint8:
        return _header("P5", a.shape[1], a.shape[0], 255) + a.tobytes()
    if a.dtype == np.uint16:
        return _header("P5", a.shape[1], a.shape[0], 65535) + a.astype(">u2").tobytes()
    raise ValueError(f"PGM pixels must be uint8 or uint16, got {a.dtype}")


def encode_ppm(rgb: np.ndarray) -> bytes:
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValueError("PPM needs an H×W×3 uint8 array")
    return _header("P6", a.shape[1], a.shape[0], 255) + a.tobytes()


def write_pgm(path, image) -> None:
    Path(path).write_bytes(encode_pgm(image))


def write_ppm(path, rgb) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def _parse(data: bytes, magic: bytes):
    """Returns (width, height, maxval, payload offset)."""
    if data[:2] != magic:
        raise FormatError(f"expected {magic.decode()} magic", 0)
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header", pos)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header", pos)
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"bad header values {fields}", pos)
    return w, h, maxval, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    w, h, maxval, off = _parse(data, b"P5")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(data) - off < need:
        raise FormatError(f"truncated pixel data: need {need} bytes", len(data))
    a = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return a.copy() if maxval < 256 else a.astype(np.uint16)


def decode_ppm(data: bytes) -> np.ndarray:
    w, h, maxval, off = _parse(data, b"P6")
    if maxval > 255:
        raise FormatError("only 8-bit PPM is supported", off)
    need = w * h * 3
    if len(data) - off < need:
        raise FormatError(f"truncated pixel data: need {need} bytes", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def probability_to_u16(p: np.ndarray) -> np.ndarray:
    """Visualization-only quantization of [0, 1] probabilities to 16 bit."""
    return np.round(np.clip(p, 0.0, 1.0) * 65535.0).astype(np.uint16)
