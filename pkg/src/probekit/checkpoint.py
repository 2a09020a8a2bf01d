"""Versioned binary checkpoints shared by both probes.

Layout: magic "PCKP" | version u32=1 | header length u32 | header JSON (UTF-8) |
tensor payloads as float64 little-endian in header order. The header carries the
model kind, a metadata dict (tag vocabulary / label order, architecture, config
echo, seed), and the tensor names and shapes. Serialization is byte-deterministic
for fixed inputs.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import StoreFormatError

MAGIC = b"PCKP"
VERSION = 1


def save_checkpoint(path, kind: str, meta: dict, params: dict[str, np.ndarray]) -> None:
    tensors = [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()]
    header = json.dumps(
        {"kind": kind, "meta": meta, "tensors": tensors},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for arr in params.values():
            fh.write(np.asarray(arr, dtype="<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise StoreFormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
    if len(data) < 12:
        raise StoreFormatError(f"{path}: truncated checkpoint")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + header_len:
        raise StoreFormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreFormatError(f"{path}: corrupt checkpoint header: {exc}") from exc

    params: dict[str, np.ndarray] = {}
    pos = 12 + header_len
    for spec in header["tensors"]:
        shape = tuple(int(s) for s in spec["shape"])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if pos + nbytes > len(data):
            raise StoreFormatError(f"{path}: truncated tensor {spec['name']!r}")
        arr = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
        params[spec["name"]] = arr
        pos += nbytes
    if pos != len(data):
        raise StoreFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return header["kind"], header["meta"], params
