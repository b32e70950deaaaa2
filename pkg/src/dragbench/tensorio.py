"""Binary tensor records and the checkpoint container built on them.

Tensor record layout (all integers little-endian u32)::

    b"ALDD" | version | rank | dims[rank] | float32 data, row-major

A checkpoint is a text index followed by concatenated tensor records::

    ALDD-CKPT 1\n
    <name>\t<offset>\t<d0,d1,...>\n     (one line per weight)
    \n
    <records...>

Offsets count bytes from the first byte after the blank line.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ALDD"
VERSION = 1
CKPT_HEADER = "ALDD-CKPT 1"


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 4 * count
    if end > len(buf):
        raise TensorFormatError("truncated tensor data")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float64), end


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr


def save_checkpoint(path: str | Path, weights: dict[str, np.ndarray]) -> None:
    blobs = []
    index = [CKPT_HEADER]
    offset = 0
    for name, arr in weights.items():
        if any(c in name for c in "\t\n"):
            raise ValueError(f"illegal weight name {name!r}")
        rec = encode_tensor(arr)
        dims = ",".join(str(d) for d in np.shape(arr))
        index.append(f"{name}\t{offset}\t{dims}")
        blobs.append(rec)
        offset += len(rec)
    out = io.BytesIO()
    out.write(("\n".join(index) + "\n\n").encode("utf-8"))
    for rec in blobs:
        out.write(rec)
    Path(path).write_bytes(out.getvalue())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    sep = buf.find(b"\n\n")
    if sep < 0:
        raise TensorFormatError("checkpoint index not terminated")
    lines = buf[:sep].decode("utf-8").split("\n")
    if lines[0] != CKPT_HEADER:
        raise TensorFormatError(f"bad checkpoint header {lines[0]!r}")
    base = sep + 2
    weights = {}
    for line in lines[1:]:
        name, off, dims = line.split("\t")
        arr, _ = decode_tensor(buf, base + int(off))
        expected = tuple(int(d) for d in dims.split(",")) if dims else ()
        if arr.shape != expected:
            raise TensorFormatError(f"{name}: index dims {expected} != record dims {arr.shape}")
        weights[name] = arr
    return weights
