"""Binary tensor files and evaluator checkpoints.

Tensor files ("FMQT"): magic, u16 format version, u8 rank, u32 dims,
then the row-major payload as little-endian floats (f64 in version 1,
f32 when written with float32=True, which bumps the version to 2).
Round-trips are bit-exact, NaN payloads included.

Checkpoints ("FMQE"): magic, u16 version, a length-prefixed JSON header
(module variant, named shape spec, extra metadata), then each named
parameter tensor in declared order as little-endian f64.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"FMQT"
CHECKPOINT_MAGIC = b"FMQE"
_TENSOR_V64 = 1
_TENSOR_V32 = 2
_CKPT_VERSION = 1


class FormatError(ValueError):
    """Raised when a binary file does not match its declared format."""


def atomic_write_bytes(path, payload: bytes):
    """Write via a temp file + rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def tensor_bytes(arr: np.ndarray, float32: bool = False) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise FormatError("rank exceeds format limit")
    version = _TENSOR_V32 if float32 else _TENSOR_V64
    dtype = "<f4" if float32 else "<f8"
    head = TENSOR_MAGIC + struct.pack("<HB", version, arr.ndim)
    head += b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def write_tensor(path, arr: np.ndarray, float32: bool = False):
    atomic_write_bytes(path, tensor_bytes(arr, float32=float32))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<HB", raw, 4)
    if version not in (_TENSOR_V64, _TENSOR_V32):
        raise FormatError(f"{path}: unsupported tensor format version {version}")
    dims = struct.unpack_from(f"<{rank}I", raw, 7)
    offset = 7 + 4 * rank
    dtype = "<f8" if version == _TENSOR_V64 else "<f4"
    itemsize = 8 if version == _TENSOR_V64 else 4
    count = int(np.prod(dims)) if rank else 1
    expected = offset + itemsize * count
    if len(raw) != expected:
        raise FormatError(f"{path}: payload length {len(raw) - offset}, expected {itemsize * count}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims)
    return data.astype(np.float64) if version == _TENSOR_V32 else data.copy()


# -- checkpoints ---------------------------------------------------------


def checkpoint_bytes(variant: str, named_params: list, meta: dict | None = None) -> bytes:
    """Serialize named (name, Tensor-or-array) pairs in declared order."""
    shapes = [[name, list(np.asarray(getattr(p, "data", p)).shape)] for name, p in named_params]
    header = {
        "version": _CKPT_VERSION,
        "variant": variant,
        "shapes": shapes,
        "meta": meta or {},
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<HI", _CKPT_VERSION, len(hjson)), hjson]
    for _, p in named_params:
        arr = np.asarray(getattr(p, "data", p), dtype="<f8")
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def write_checkpoint(path, variant: str, named_params: list, meta: dict | None = None):
    atomic_write_bytes(path, checkpoint_bytes(variant, named_params, meta))


def read_checkpoint(path):
    """Returns (variant, list of (name, ndarray), meta)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    offset = 10 + hlen
    params = []
    for name, shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        params.append((name, arr.copy()))
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after declared parameters")
    return header["variant"], params, header.get("meta", {})
