"""Minimal readers for the two corpus formats the dumper consumes.

Tagged corpora are "TOKEN<TAB>TAG" lines with blank-line sentence separators
(sentences named s0, s1, ... in file order); pair corpora are newline-delimited
JSON objects with id / premise_tokens / hypothesis_tokens keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: list[str]


@dataclass(frozen=True)
class SentencePair:
    id: str
    premise_tokens: list[str]
    hypothesis_tokens: list[str]


def read_tagged(path) -> list[Sentence]:
    sentences: list[Sentence] = []
    tokens: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                if tokens:
                    sentences.append(Sentence(f"s{len(sentences)}", tokens))
                    tokens = []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ValueError(f"{path}:{lineno}: expected 'TOKEN<TAB>TAG', got {line!r}")
            tokens.append(parts[0])
    if tokens:
        sentences.append(Sentence(f"s{len(sentences)}", tokens))
    return sentences


def read_pairs(path) -> list[SentencePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                pairs.append(
                    SentencePair(
                        str(rec["id"]),
                        [str(t) for t in rec["premise_tokens"]],
                        [str(t) for t in rec["hypothesis_tokens"]],
                    )
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing key {exc}") from exc
    return pairs
