"""Binary container shared by checkpoints, PoFU records, gradient matrices,
projection bases and inversion-model weights.

Layout::

    12-byte magic | uint32 LE version            (16 bytes)
    uint32 LE header length | UTF-8 JSON header  (sorted keys, compact)
    payload: little-endian float32

The header is canonical JSON so identical metadata always produces identical
bytes, which the reproducibility checks rely on.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

VERSION = 1

MAGIC_CHECKPOINT = b"IGFLAB-CKPT\x00"
MAGIC_POFU = b"IGFLAB-POFU\x00"
MAGIC_GRADS = b"IGFLAB-GRAD\x00"
MAGIC_BASIS = b"IGFLAB-BASE\x00"
MAGIC_INVERSION = b"IGFLAB-INVM\x00"
MAGIC_RECON = b"IGFLAB-RECO\x00"


class FormatError(ValueError):
    """Raised when a file does not match the expected container format."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(magic: bytes, header: dict, payload: np.ndarray) -> bytes:
    if len(magic) != 12:
        raise ValueError("magic must be 12 bytes")
    meta = canonical_json(header).encode("utf-8")
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    return b"".join([magic, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta, body])


def decode(magic: bytes, blob: bytes) -> tuple[dict, np.ndarray]:
    if len(blob) < 20 or blob[:12] != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {blob[:12]!r}")
    (version,) = struct.unpack("<I", blob[12:16])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    (n,) = struct.unpack("<I", blob[16:20])
    header = json.loads(blob[20 : 20 + n].decode("utf-8"))
    body = blob[20 + n :]
    if len(body) % 4:
        raise FormatError("payload is not a whole number of float32 values")
    payload = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return header, payload


def write(path: str | Path, magic: bytes, header: dict, payload: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(magic, header, payload))
    return path


def read(path: str | Path, magic: bytes) -> tuple[dict, np.ndarray]:
    return decode(magic, Path(path).read_bytes())


def peek_header(path: str | Path) -> tuple[bytes, dict]:
    """Return (magic, header) without decoding the payload."""
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20:
            raise FormatError(f"{path}: truncated")
        (n,) = struct.unpack("<I", head[16:20])
        return head[:12], json.loads(fh.read(n).decode("utf-8"))
