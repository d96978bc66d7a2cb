"""Versioned binary parameter files.

Layout (little-endian)::

    magic  b"IBCK"  | version u32 | tensor count u32
    per tensor: name length u32 | name utf-8 | dtype u8 | ndim u32 | shape u32*ndim | raw data

Non-tensor metadata (model hyperparameters) is stored as a uint8 tensor
named ``__meta__`` holding JSON.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"IBCK"
VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.uint8, 3: np.int64}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}
META_KEY = "__meta__"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    items = {k: np.array(v.detach().cpu().numpy() if torch.is_tensor(v) else v, order="C")
             for k, v in tensors.items()}
    if meta is not None:
        items[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = bytearray(MAGIC + struct.pack("<II", VERSION, len(items)))
    for name, arr in items.items():
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    """Returns ``(tensors, meta)`` with tensors as torch tensors."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors, meta = {}, None
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BI", data, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[code]).newbyteorder("<")
        size = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        if name == META_KEY:
            meta = json.loads(arr.tobytes().decode())
        else:
            tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, meta


def save_module(path, module: torch.nn.Module, meta: dict | None = None) -> None:
    save_checkpoint(path, module.state_dict(), meta)


def load_into(module: torch.nn.Module, tensors: dict) -> torch.nn.Module:
    module.load_state_dict({k: v for k, v in tensors.items()})
    return module
