"""Binary weight files.

Layout, all integers little-endian u32::

    b"DLPB"  version  spec_len  spec_utf8[spec_len]  n_tensors
    repeated n_tensors times:
        id_len  id_utf8[id_len]  ndim  dims[ndim]  float32_le[prod(dims)]

Tensor ids are ``"<layer id>/weights"`` and ``"<layer id>/bias"`` in layer
order.  The spec section is the graph's JSON text form.
"""

from __future__ import annotations

import math
import os
import struct

import numpy as np

from .graph import NetworkGraph

MAGIC = b"DLPB"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class WeightFileError(ValueError):
    """Malformed or inconsistent weight file."""


def _tensor_entries(net: NetworkGraph):
    for lid, (ws, bs) in net.param_shapes().items():
        yield f"{lid}/weights", ws, 0
        yield f"{lid}/bias", bs, 1


def serialized_size(net: NetworkGraph) -> dict:
    """Byte accounting for ``serialize(net)`` without allocating parameters."""
    spec = net.spec_text().encode("utf-8")
    header = len(MAGIC) + 4 + 4 + len(spec) + 4
    meta = 0
    payload = 0
    for tid, shape, _ in _tensor_entries(net):
        meta += 4 + len(tid.encode("utf-8")) + 4 + 4 * len(shape)
        payload += 4 * math.prod(shape)
    return {"header": header, "tensor_meta": meta, "payload": payload, "total": header + meta + payload}


def to_bytes(net: NetworkGraph) -> bytes:
    if not net.is_parameterized:
        raise WeightFileError(f"network {net.name!r} is not fully parameterized")
    spec = net.spec_text().encode("utf-8")
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(spec)), spec]
    entries = list(_tensor_entries(net))
    parts.append(_U32.pack(len(entries)))
    for tid, shape, slot in entries:
        arr = net.params[tid.rsplit("/", 1)[0]][slot]
        raw = tid.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(len(shape))]
        parts += [_U32.pack(d) for d in shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError(f"truncated payload while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def from_bytes(data: bytes) -> NetworkGraph:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError("bad magic: not a DLPB weight file")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    spec = r.take(r.u32("spec length"), "spec").decode("utf-8")
    net = NetworkGraph.from_spec_text(spec)
    declared = {tid: (shape, slot) for tid, shape, slot in _tensor_entries(net)}
    count = r.u32("tensor count")
    if count != len(declared):
        raise WeightFileError(f"file holds {count} tensors, spec declares {len(declared)}")
    found: dict[str, list] = {}
    for _ in range(count):
        tid = r.take(r.u32("tensor id length"), "tensor id").decode("utf-8")
        ndim = r.u32(f"{tid} ndim")
        shape = tuple(r.u32(f"{tid} dims") for _ in range(ndim))
        if tid not in declared:
            raise WeightFileError(f"tensor {tid!r} is not declared by the spec")
        if shape != declared[tid][0]:
            raise WeightFileError(f"tensor {tid!r}: shape {shape} disagrees with spec {declared[tid][0]}")
        buf = r.take(4 * math.prod(shape), f"{tid} data")
        values = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
        found.setdefault(tid.rsplit("/", 1)[0], [None, None])[declared[tid][1]] = values
    if r.pos != len(data):
        raise WeightFileError(f"{len(data) - r.pos} trailing bytes after last tensor")
    net.params = {lid: (w, b) for lid, (w, b) in found.items()}
    net.validate()
    return net


def serialize(net: NetworkGraph, path) -> int:
    """Write ``net`` to ``path``; returns the number of bytes written."""
    data = to_bytes(net)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)
    return len(data)


def deserialize(path) -> NetworkGraph:
    with open(os.fspath(path), "rb") as fh:
        return from_bytes(fh.read())
