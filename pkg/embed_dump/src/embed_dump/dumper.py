"""Corpus-to-store extraction with word-level pooling of subword vectors."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backends import SequenceTooLong, resolve_backend
from .corpus_io import Sentence, SentencePair
from .pte import Record, write_pte

MODES = ("separate", "together")
POOLING = ("first", "mean")


@dataclass
class DumpSpec:
    """What to extract: which model, pair-encoding mode, and subword pooling.

    All encoder layers are always emitted; choosing/combining layers happens
    downstream at training time.
    """

    model: str
    mode: str = "separate"
    pool: str = "first"
    output_path: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pool not in POOLING:
            raise ValueError(f"pool must be one of {POOLING}, got {self.pool!r}")


@dataclass
class DumpResult:
    records: list[Record]
    skipped: list[dict] = field(default_factory=list)

    def meta(self, spec: DumpSpec, backend) -> dict:
        return {
            "model": spec.model,
            "mode": spec.mode,
            "pool": spec.pool,
            "num_layers": backend.num_layers,
            "dim": backend.dim,
            "records": len(self.records),
            "skipped": self.skipped,
        }


def pool_to_words(values: np.ndarray, word_ids, num_words: int, pool: str) -> np.ndarray:
    """Collapse (K, S, D) subtoken vectors to (K, num_words, D) word vectors.

    Positions with word id None (special tokens) are dropped. Every word must
    own at least one subtoken position.
    """
    k, _, d = values.shape
    out = np.empty((k, num_words, d), dtype=np.float32)
    positions: list[list[int]] = [[] for _ in range(num_words)]
    for pos, word in enumerate(word_ids):
        if word is None:
            continue
        if not (0 <= word < num_words):
            raise ValueError(f"word id {word} out of range for {num_words} words")
        positions[word].append(pos)
    for word, owned in enumerate(positions):
        if not owned:
            raise ValueError(f"word {word} has no subtoken positions")
        if pool == "first":
            out[:, word, :] = values[:, owned[0], :]
        else:
            out[:, word, :] = values[:, owned, :].mean(axis=1, dtype=np.float64)
    return out


def dump_tagged(spec: DumpSpec, sentences: list[Sentence], backend=None) -> DumpResult:
    """One record per sentence, K = all encoder layers, word-level vectors."""
    if spec.mode != "separate":
        raise ValueError("tagged corpora only support separate mode")
    backend = backend or resolve_backend(spec.model)
    result = DumpResult(records=[])
    for sent in sentences:
        try:
            values, word_ids = backend.encode(sent.tokens)
        except SequenceTooLong as exc:
            warnings.warn(f"skipping {sent.id}: {exc}")
            result.skipped.append({"id": sent.id, "reason": str(exc)})
            continue
        pooled = pool_to_words(values, word_ids, len(sent.tokens), spec.pool)
        result.records.append(Record(sent.id, pooled))
    return result


def dump_pairs(spec: DumpSpec, pairs: list[SentencePair], backend=None) -> DumpResult:
    """Two records per pair ("<id>/p", "<id>/h").

    Separate mode encodes each sentence on its own; together mode encodes the
    joint sequence with the backend's separator convention, then splits the
    word-level vectors back into the two records (special positions dropped).
    """
    backend = backend or resolve_backend(spec.model)
    result = DumpResult(records=[])
    for pair in pairs:
        l1, l2 = len(pair.premise_tokens), len(pair.hypothesis_tokens)
        try:
            if spec.mode == "separate":
                values_p, ids_p = backend.encode(pair.premise_tokens)
                values_h, ids_h = backend.encode(pair.hypothesis_tokens)
                premise = pool_to_words(values_p, ids_p, l1, spec.pool)
                hypothesis = pool_to_words(values_h, ids_h, l2, spec.pool)
            else:
                values, word_ids = backend.encode_pair(
                    pair.premise_tokens, pair.hypothesis_tokens
                )
                joint = pool_to_words(values, word_ids, l1 + l2, spec.pool)
                premise, hypothesis = joint[:, :l1, :], joint[:, l1:, :]
        except SequenceTooLong as exc:
            warnings.warn(f"skipping {pair.id}: {exc}")
            result.skipped.append({"id": pair.id, "reason": str(exc)})
            continue
        result.records.append(Record(f"{pair.id}/p", premise))
        result.records.append(Record(f"{pair.id}/h", hypothesis))
    return result


def write_result(result: DumpResult, spec: DumpSpec, backend, path) -> None:
    """Write the store plus a JSON metadata sidecar (<path>.meta.json)."""
    write_pte(result.records, path)
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(result.meta(spec, backend), fh, indent=2, sort_keys=True)
        fh.write("\n")
