"""Portable fixed-embedding store (PTE format) and the trainable scalar layer mix.

PTE layout, little-endian throughout:

    magic "PTEB" | version u32=1 | record count u32 |
    per record: id length u32 | id UTF-8 | K u32 | L u32 | D u32 |
                K*L*D float32 values (layer-major, then token, then dimension)

Records hold all encoder layers for one sequence; combining layers is done at
training time by ``mix`` with softmax-normalized learnt weights and a global
scale. Storage is float32; all arithmetic here is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import StoreFormatError, ValidationError

MAGIC = b"PTEB"
VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    """Per-layer token embeddings for one sequence: values has shape (K, L, D)."""

    id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValidationError(
                f"record {self.id!r}: values must be a K x L x D tensor, got shape {values.shape}"
            )
        if not np.isfinite(values).all():
            raise ValidationError(f"record {self.id!r}: values contain NaN or Inf")
        object.__setattr__(self, "values", values)

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]

    @property
    def seq_len(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


class EmbeddingStore:
    """Immutable id-addressable collection of EmbeddingRecords."""

    def __init__(self, records: list[EmbeddingRecord]):
        self._records: dict[str, EmbeddingRecord] = {}
        for rec in records:
            if rec.id in self._records:
                raise ValidationError(f"duplicate record id {rec.id!r}")
            self._records[rec.id] = rec

    def __getitem__(self, record_id: str) -> EmbeddingRecord:
        try:
            return self._records[record_id]
        except KeyError:
            raise KeyError(f"no embedding record with id {record_id!r}") from None

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def ids(self) -> list[str]:
        return list(self._records)

    def records(self) -> list[EmbeddingRecord]:
        return list(self._records.values())


def write_store(records: list[EmbeddingRecord], path) -> None:
    """Write records to a PTE file; byte-deterministic for a fixed record list."""
    ids = set()
    for rec in records:
        if rec.id in ids:
            raise ValidationError(f"duplicate record id {rec.id!r}")
        ids.add(rec.id)
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


def read_store(path) -> EmbeddingStore:
    """Read a PTE file, validating magic, version, payload size, and finiteness."""
    with open(path, "rb") as fh:
        data = fh.read()

    def take(offset: int, n: int) -> tuple[bytes, int]:
        if offset + n > len(data):
            raise StoreFormatError(f"{path}: truncated payload")
        return data[offset : offset + n], offset + n

    chunk, pos = take(0, 4)
    if chunk != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {chunk!r}")
    chunk, pos = take(pos, 8)
    version, count = struct.unpack("<II", chunk)
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")

    records = []
    for _ in range(count):
        chunk, pos = take(pos, 4)
        (id_len,) = struct.unpack("<I", chunk)
        chunk, pos = take(pos, id_len)
        rec_id = chunk.decode("utf-8")
        chunk, pos = take(pos, 12)
        k, l, d = struct.unpack("<III", chunk)
        if min(k, l, d) < 1:
            raise StoreFormatError(f"{path}: record {rec_id!r} has empty dimensions {(k, l, d)}")
        chunk, pos = take(pos, 4 * k * l * d)
        values = np.frombuffer(chunk, dtype="<f4").reshape(k, l, d)
        if not np.isfinite(values).all():
            raise StoreFormatError(f"{path}: record {rec_id!r} contains NaN or Inf")
        records.append(EmbeddingRecord(rec_id, values))
    if pos != len(data):
        raise StoreFormatError(f"{path}: {len(data) - pos} trailing bytes after last record")
    return EmbeddingStore(records)


@dataclass
class MixWeights:
    """Trainable scalar layer weights: softmax(raw) combination scaled by exp(log_gamma).

    ``raw`` is a length-K float64 vector and ``log_gamma`` a 0-d float64 array so
    that the optimizer can update both in place.
    """

    raw: np.ndarray
    log_gamma: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64).reshape(-1)
        if self.raw.size < 1:
            raise ValidationError("mix weights need at least one layer")
        self.log_gamma = np.asarray(self.log_gamma, dtype=np.float64).reshape(())

    @classmethod
    def zeros(cls, num_layers: int) -> "MixWeights":
        return cls(np.zeros(num_layers), np.zeros(()))

    @property
    def num_layers(self) -> int:
        return self.raw.size

    @property
    def gamma(self) -> float:
        return float(np.exp(self.log_gamma))

    def normalized(self) -> np.ndarray:
        """Softmax of the raw weights; overflow-safe for extreme raw values."""
        with np.errstate(over="ignore"):  # shifting by the max may underflow to -inf
            shifted = self.raw - self.raw.max()
        e = np.exp(shifted)
        return e / e.sum()

    def copy(self) -> "MixWeights":
        return MixWeights(self.raw.copy(), self.log_gamma.copy())


def mix(record: EmbeddingRecord, w: MixWeights) -> np.ndarray:
    """Weighted layer combination: gamma * sum_k softmax(raw)_k * values[k], float64 (L, D)."""
    if record.num_layers != w.num_layers:
        raise ValidationError(
            f"record {record.id!r} has {record.num_layers} layers, mix expects {w.num_layers}"
        )
    values = record.values.astype(np.float64)
    return w.gamma * np.tensordot(w.normalized(), values, axes=1)


def mix_backward(
    record: EmbeddingRecord, w: MixWeights, upstream: np.ndarray
) -> tuple[np.ndarray, float]:
    """Gradients of a scalar loss w.r.t. (raw, log_gamma) given d(loss)/d(mix output).

    Uses the softmax Jacobian: d_raw_j = s_j * (d_s_j - sum_k s_k d_s_k) where
    d_s_k = gamma * <upstream, values[k]>.
    """
    if record.num_layers != w.num_layers:
        raise ValidationError(
            f"record {record.id!r} has {record.num_layers} layers, mix expects {w.num_layers}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    values = record.values.astype(np.float64)
    if upstream.shape != values.shape[1:]:
        raise ValidationError(
            f"upstream shape {upstream.shape} does not match mix output {values.shape[1:]}"
        )
    s = w.normalized()
    gamma = w.gamma
    per_layer = np.tensordot(values, upstream, axes=([1, 2], [0, 1]))  # <values[k], upstream>
    d_s = gamma * per_layer
    d_raw = s * (d_s - float(s @ d_s))
    d_log_gamma = gamma * float(s @ per_layer)
    return d_raw, d_log_gamma
