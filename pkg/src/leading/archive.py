"""Flat tensor archive: a UTF-8 text header naming each tensor, then raw little-endian data.

Layout::

    LEADING-TENSORS 1
    <name> <dtype> <dim0>x<dim1>...
    ...
    <blank line>
    <raw bytes of each tensor, in header order, C order>

A scalar uses the shape token ``-``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "LEADING-TENSORS 1"


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = [MAGIC]
    blobs = []
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} must be nonempty without whitespace")
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "-"
        header.append(f"{name} {arr.dtype.str} {shape}")
        blobs.append(arr.tobytes())
    return ("\n".join(header) + "\n\n").encode("utf-8") + b"".join(blobs)


def loads(data: bytes) -> dict[str, np.ndarray]:
    end = data.find(b"\n\n")
    if end < 0:
        raise ValueError("tensor archive: missing header terminator")
    lines = data[:end].decode("utf-8").split("\n")
    if lines[0] != MAGIC:
        raise ValueError(f"tensor archive: bad magic {lines[0]!r}")
    out = {}
    offset = end + 2
    for line in lines[1:]:
        name, dtype, shape_tok = line.split(" ")
        shape = () if shape_tok == "-" else tuple(int(d) for d in shape_tok.split("x"))
        dt = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise ValueError(f"tensor archive: truncated data for {name!r}")
        out[name] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise ValueError("tensor archive: trailing bytes")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
