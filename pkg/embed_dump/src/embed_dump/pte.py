"""Writer for the PTE fixed-embedding interchange format.

Little-endian layout: magic "PTEB", version u32 = 1, record count u32, then per
record: id length u32, id UTF-8 bytes, K u32, L u32, D u32, and K*L*D IEEE-754
binary32 values in layer-major, token-major, dimension order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PTEB"
VERSION = 1


@dataclass(frozen=True)
class Record:
    id: str
    values: np.ndarray  # (K, L, D) float32

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"record {self.id!r}: values must be K x L x D, got {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError(f"record {self.id!r}: non-finite values")
        object.__setattr__(self, "values", values)


def write_pte(records: list[Record], path) -> None:
    seen = set()
    for rec in records:
        if rec.id in seen:
            raise ValueError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for rec in records:
            id_bytes = rec.id.encode("utf-8")
            k, l, d = rec.values.shape
            fh.write(struct.pack("<I", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<III", k, l, d))
            fh.write(rec.values.astype("<f4", copy=False).tobytes(order="C"))
