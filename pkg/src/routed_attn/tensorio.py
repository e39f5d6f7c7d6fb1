"""Binary tensor container.

Layout (all little-endian)::

    b"VRTA" | u32 version (=1) | u32 dtype (1=f64, 2=f32) | u32 rank
    | rank x u64 dims | row-major payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"VRTA"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2}


def encode(t) -> bytes:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if a.dtype == np.bool_ or np.issubdtype(a.dtype, np.integer):
        a = a.astype(np.float64)
    code = _CODES.get(a.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    head = MAGIC + struct.pack("<III", VERSION, code, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes) -> torch.Tensor:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("bad magic, not a VRTA tensor")
    version, code, rank = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 16 + 8 * rank
    if len(buf) < off:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 16)
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + n * dt.itemsize:
        raise FormatError(f"payload size mismatch for shape {dims}")
    a = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims)
    return torch.from_numpy(a.astype(dt.newbyteorder("="), copy=True))


def save(path, t) -> None:
    Path(path).write_bytes(encode(t))


def load(path) -> torch.Tensor:
    return decode(Path(path).read_bytes())
