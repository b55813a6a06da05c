"""Binary checkpoint container.

Layout (little-endian):

    b"SACK"  u32 version=1  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 dtype (0 = f64), u8 trainable,
                u8 ndim, u32 dims[ndim], f64 payload
    u32 CRC32 of every preceding byte

Run metadata rides along as reserved tensors under ``meta.``: the epoch, the
best validation Dice, the PRNG state split into four 16-bit limbs (exact in
f64) and the config snapshot as UTF-8 JSON bytes stored one per element.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"SACK"
VERSION = 1
DTYPE_F64 = 0
META_PREFIX = "meta."


@dataclass
class Checkpoint:
    tensors: dict                      # name -> np.ndarray (float64)
    trainable: dict                    # name -> bool
    config: dict = field(default_factory=dict)
    epoch: int = 0
    best_val_dice: float = 0.0
    rng_state: int = 0

    def __post_init__(self):
        if not self.tensors:
            raise ValidationError("checkpoint has no tensors")
        for name in self.tensors:
            if name.startswith(META_PREFIX):
                raise ValidationError(f"tensor name {name!r} uses the reserved prefix {META_PREFIX!r}")
        if set(self.tensors) != set(self.trainable):
            raise ValidationError("every tensor needs exactly one trainable flag")


def _meta_tensors(ckpt: Checkpoint) -> list:
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    limbs = [(ckpt.rng_state >> (16 * i)) & 0xFFFF for i in range(4)]
    return [
        ("meta.epoch", np.array([float(ckpt.epoch)])),
        ("meta.best_val_dice", np.array([float(ckpt.best_val_dice)])),
        ("meta.rng_state", np.array(limbs, dtype=np.float64)),
        ("meta.config", np.frombuffer(cfg, dtype=np.uint8).astype(np.float64)),
    ]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = [(n, np.asarray(v, dtype=np.float64), bool(ckpt.trainable[n])) for n, v in ckpt.tensors.items()]
    entries += [(n, v, False) for n, v in _meta_tensors(ckpt)]
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(entries))
    for name, arr, trainable in entries:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BBB", DTYPE_F64, int(trainable), arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16:
        raise FormatError("file too short for a checkpoint", len(data))
    if data[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("CRC32 mismatch", len(data) - 4)
    r = _Reader(body)
    r.pos = 4
    version, count = r.unpack("II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    tensors, trainable, meta = {}, {}, {}
    for _ in range(count):
        start = r.pos
        (n_len,) = r.unpack("H", "name length")
        try:
            name = r.take(n_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start + 2) from None
        dtype, flag, ndim = r.unpack("BBB", "tensor header")
        if dtype != DTYPE_F64:
            raise FormatError(f"unknown dtype code {dtype}", r.pos - 3)
        if flag > 1:
            raise FormatError(f"bad trainable flag {flag}", r.pos - 2)
        dims = r.unpack(f"{ndim}I", "dims")
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n, "payload"), dtype="<f8").astype(np.float64).reshape(dims)
        if name in tensors or name in meta:
            raise FormatError(f"duplicate tensor {name!r}", start)
        if name.startswith(META_PREFIX):
            meta[name] = arr
        else:
            tensors[name] = arr
            trainable[name] = bool(flag)
    if r.pos != len(body):
        raise FormatError("trailing bytes after tensor table", r.pos)
    if not tensors:
        raise FormatError("empty tensor table", 8)
    try:
        config = json.loads(meta["meta.config"].astype(np.uint8).tobytes().decode("utf-8"))
        limbs = [int(v) for v in meta["meta.rng_state"]]
        rng_state = sum(l << (16 * i) for i, l in enumerate(limbs))
        epoch = int(meta["meta.epoch"][0])
        best = float(meta["meta.best_val_dice"][0])
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"missing or malformed metadata ({exc})", len(body)) from None
    return Checkpoint(tensors, trainable, config, epoch, best, rng_state)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
