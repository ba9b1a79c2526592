"""Binary parameter checkpoints.

Layout: ``b"RWNET"``, one format-version byte, then for every tensor in
``param_names`` order: uint32 name length, UTF-8 name, uint32 rank, rank x
uint32 dims, float32 data (row-major).  All integers and floats little-endian.
Convolution weights are stored as ``(k*k*c_in, c_out)`` matrices.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..io import FormatError
from .model import NetSpec, Params, param_names

MAGIC = b"RWNET"
VERSION = 1


def encode_checkpoint(params: Params) -> bytes:
    spec = NetSpec.from_params(params)
    out = bytearray(MAGIC + bytes([VERSION]))
    for name in param_names(spec):
        t = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += t.tobytes()
    return bytes(out)


def decode_checkpoint(data: bytes, dtype=np.float32) -> Params:
    if data[:5] != MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:5]!r} at offset 0")
    if len(data) < 6:
        raise FormatError("checkpoint truncated at offset 5")
    if data[5] != VERSION:
        raise FormatError(f"unsupported checkpoint version {data[5]} at offset 5")
    pos = 6
    params: Params = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"checkpoint truncated at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        start = pos
        (nlen,) = struct.unpack("<I", take(4))
        if nlen > 256:
            raise FormatError(f"implausible tensor name length {nlen} at offset {start}")
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"bad tensor name at offset {start + 4}") from None
        (rank,) = struct.unpack("<I", take(4))
        if rank > 4:
            raise FormatError(f"implausible rank {rank} at offset {pos - 4}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        if not np.isfinite(arr).all():
            raise FormatError(f"non-finite values in tensor {name!r} at offset {start}")
        params[name] = arr.astype(dtype)
    try:
        spec = NetSpec.from_params(params)
        expected = param_names(spec)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint is missing tensors: {exc}") from None
    if list(params) != expected:
        raise FormatError("checkpoint tensors are not in the expected order")
    for name, k, ci, co in spec.layer_shapes():
        if params[f"{name}.w"].shape != (k * k * ci, co) or params[f"{name}.b"].shape != (co,):
            raise FormatError(f"tensor {name!r} has inconsistent shape")
    return params


def save_checkpoint(path, params: Params) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, dtype=np.float32) -> Params:
    return decode_checkpoint(Path(path).read_bytes(), dtype)
