"""
Checkpoint container.

Layout::

    8 bytes   magic b"GMKCKPT\\0"
    4 bytes   little-endian uint32 header length H
    H bytes   UTF-8 JSON header: version, dtype, architecture, metadata and
              one entry per parameter (layer, name, shape, offset, nbytes)
    ...       raw little-endian parameter arrays, concatenated
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IncompatibleCheckpoint, ParseError
from .nn import DTYPES, Network

MAGIC = b"GMKCKPT\0"
VERSION = 1


@dataclass
class Checkpoint:
    network: Network
    metadata: dict = field(default_factory=dict)

    @property
    def architecture(self):
        return self.network.architecture()


def save_checkpoint(path, net, **metadata):
    """Write ``net`` and provenance ``metadata`` (regime, seed, epoch, ...) to ``path``."""
    le = "<f4" if net.dtype == "float32" else "<f8"
    entries, blobs, offset = [], [], 0
    for i, name, p in net.parameters():
        raw = np.ascontiguousarray(p, dtype=le).tobytes()
        entries.append(
            {"layer": i, "name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "dtype": net.dtype,
        "architecture": net.architecture(),
        "metadata": metadata,
        "params": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)
    return path


def _read_header(data):
    if len(data) < len(MAGIC) + 4:
        raise ParseError("file too short for header", field="magic")
    if data[: len(MAGIC)] != MAGIC:
        raise ParseError("not a gamakit checkpoint", field="magic")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(data) < start + hlen:
        raise ParseError(f"header truncated ({len(data) - start} of {hlen} bytes)", field="header")
    try:
        header = json.loads(data[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed JSON ({exc})", field="header") from None
    for key in ("version", "dtype", "architecture", "params"):
        if key not in header:
            raise ParseError("missing", field=key)
    if header["version"] != VERSION:
        raise ParseError(f"unsupported version {header['version']!r}", field="version")
    if header["dtype"] not in DTYPES:
        raise ParseError(f"unknown dtype {header['dtype']!r}", field="dtype")
    return header, start + hlen


def load_checkpoint(path):
    """Read a checkpoint file into a fresh :class:`Network`."""
    data = Path(path).read_bytes()
    header, body = _read_header(data)
    try:
        net = Network.from_architecture(header["architecture"], dtype=header["dtype"])
    except Exception as exc:
        raise ParseError(f"cannot build network ({exc})", field="architecture") from None
    le = "<f4" if header["dtype"] == "float32" else "<f8"
    expected = {(i, name): p.shape for i, name, p in net.parameters()}
    seen = set()
    for entry in header["params"]:
        try:
            key = (entry["layer"], entry["name"])
            shape = tuple(entry["shape"])
            off, nbytes = entry["offset"], entry["nbytes"]
        except (KeyError, TypeError):
            raise ParseError(f"bad entry {entry!r}", field="params") from None
        fname = f"params[{key[0]}].{key[1]}"
        if key not in expected:
            raise ParseError("no such parameter in architecture", field=fname)
        if expected[key] != shape:
            raise ParseError(f"shape {shape} != architecture shape {expected[key]}", field=fname)
        lo, hi = body + off, body + off + nbytes
        if hi > len(data) or nbytes != int(np.prod(shape)) * np.dtype(le).itemsize:
            raise ParseError("data truncated or size mismatch", field=fname)
        arr = np.frombuffer(data[lo:hi], dtype=le).reshape(shape)
        net.layers[key[0]].params[key[1]] = arr.astype(DTYPES[header["dtype"]])
        seen.add(key)
    missing = set(expected) - seen
    if missing:
        i, name = sorted(missing)[0]
        raise ParseError("missing parameter data", field=f"params[{i}].{name}")
    return Checkpoint(net, header.get("metadata", {}))


def load_into(net, path):
    """Load parameters from ``path`` into ``net``, requiring an identical architecture."""
    ckpt = load_checkpoint(path)
    if ckpt.architecture != net.architecture():
        raise IncompatibleCheckpoint(
            f"checkpoint architecture {ckpt.architecture} does not match network {net.architecture()}"
        )
    for i, name, _ in ckpt.network.parameters():
        net.layers[i].params[name] = ckpt.network.layers[i].params[name].astype(net.np_dtype)
    return net
