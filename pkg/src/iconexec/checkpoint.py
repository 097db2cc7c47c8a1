"""Binary parameter container shared by ICON and policy checkpoints.

Layout (little endian)::

    magic        4 bytes  (b"ICON" or b"OCNT")
    version      u32
    config_len   u32, followed by config_len bytes of UTF-8 JSON
    n_tensors    u32
    per tensor:  name_len u32, name bytes, ndim u32, ndim x u32 dims,
                 prod(dims) x float32 data
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ParseError

FORMAT_VERSION = 1


def write_container(path, magic: bytes, config: dict, tensors: dict):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    data = b"".join(parts)
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_container(path, magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != magic:
        raise ParseError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ParseError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, cfg_len = take("<II")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    config = json.loads(data[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (n,) = take("<I")
    tensors = {}
    for _ in range(n):
        (name_len,) = take("<I")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        if pos + 4 * count > len(data):
            raise ParseError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return config, tensors
