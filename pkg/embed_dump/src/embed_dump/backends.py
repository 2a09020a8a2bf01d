"""Encoder backends: a deterministic debug encoder and pretrained transformers.

A backend turns a word sequence into per-layer subtoken vectors plus a word-id
per subtoken position (None for special tokens), mirroring how transformer
tokenizers report alignment. ``encode_pair`` encodes the joint
"[CLS] a ... [SEP] b ... [SEP]"-style sequence used by sentence-pair models;
word ids for the second sentence continue after the first.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class SequenceTooLong(Exception):
    """The (sub)token sequence exceeds the backend's length limit."""


def _parse_options(text: str) -> dict[str, int]:
    options = {}
    if text:
        for part in text.split(","):
            key, _, value = part.partition("=")
            options[key.strip()] = int(value)
    return options


@dataclass
class DebugBackend:
    """Context-free hashed one-hot features, for tests and pipeline dry runs.

    Each subtoken lights a single dimension chosen by a stable hash of its
    text (shifted by the layer index), so output is bit-reproducible across
    runs and processes and identical regardless of surrounding context.
    Tokens longer than ``max_subtoken`` characters are split into chunks to
    emulate subword tokenization; 0 disables splitting.
    """

    dim: int = 64
    num_layers: int = 1
    max_subtoken: int = 4
    max_length: int | None = None

    CLS = "<cls>"
    SEP = "<sep>"

    def subtokens(self, token: str) -> list[str]:
        if self.max_subtoken <= 0 or len(token) <= self.max_subtoken:
            return [token]
        step = self.max_subtoken
        return [token[i : i + step] for i in range(0, len(token), step)]

    def _bucket(self, subtoken: str) -> int:
        digest = hashlib.sha256(subtoken.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") % self.dim

    def _vectors(self, pieces: list[str]) -> np.ndarray:
        values = np.zeros((self.num_layers, len(pieces), self.dim), dtype=np.float32)
        for pos, piece in enumerate(pieces):
            base = self._bucket(piece)
            for layer in range(self.num_layers):
                values[layer, pos, (base + layer) % self.dim] = 1.0
        return values

    def _check_length(self, n: int) -> None:
        if self.max_length is not None and n > self.max_length:
            raise SequenceTooLong(f"{n} subtokens exceeds limit {self.max_length}")

    def encode(self, tokens: list[str]):
        pieces: list[str] = []
        word_ids: list[int | None] = []
        for w, token in enumerate(tokens):
            for piece in self.subtokens(token):
                pieces.append(piece)
                word_ids.append(w)
        self._check_length(len(pieces))
        return self._vectors(pieces), word_ids

    def encode_pair(self, tokens_a: list[str], tokens_b: list[str]):
        pieces: list[str] = [self.CLS]
        word_ids: list[int | None] = [None]
        for w, token in enumerate(tokens_a):
            for piece in self.subtokens(token):
                pieces.append(piece)
                word_ids.append(w)
        pieces.append(self.SEP)
        word_ids.append(None)
        offset = len(tokens_a)
        for w, token in enumerate(tokens_b):
            for piece in self.subtokens(token):
                pieces.append(piece)
                word_ids.append(offset + w)
        pieces.append(self.SEP)
        word_ids.append(None)
        self._check_length(len(pieces))
        return self._vectors(pieces), word_ids


class TransformersBackend:
    """All hidden layers of a local or hub transformers checkpoint.

    K = embedding layer + one per transformer layer (13 for a 12-layer
    encoder). Requires the ``hf`` extra; sequences beyond the model's maximum
    raise SequenceTooLong so the dumper can skip and record them.
    """

    def __init__(self, model_name_or_path: str):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - exercised only without extras
            raise ImportError(
                "the transformers backend needs the 'hf' extra "
                "(pip install embed-dump[hf])"
            ) from exc
        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_name_or_path)
        self.model = AutoModel.from_pretrained(
            model_name_or_path, output_hidden_states=True
        ).eval()
        self.num_layers = self.model.config.num_hidden_layers + 1
        self.dim = self.model.config.hidden_size
        self.max_length = getattr(self.model.config, "max_position_embeddings", None)

    def _run(self, encoding):
        if self.max_length is not None and encoding["input_ids"].shape[1] > self.max_length:
            raise SequenceTooLong(
                f"{encoding['input_ids'].shape[1]} subtokens exceeds "
                f"model limit {self.max_length}"
            )
        with self._torch.no_grad():
            output = self.model(**encoding)
        hidden = self._torch.stack(output.hidden_states)  # (K, 1, S, D)
        return hidden[:, 0].numpy().astype(np.float32)

    def encode(self, tokens: list[str]):
        encoding = self.tokenizer(tokens, is_split_into_words=True, return_tensors="pt")
        return self._run(encoding), encoding.word_ids(0)

    def encode_pair(self, tokens_a: list[str], tokens_b: list[str]):
        encoding = self.tokenizer(
            tokens_a, tokens_b, is_split_into_words=True, return_tensors="pt"
        )
        word_ids: list[int | None] = []
        offset = len(tokens_a)
        for pos, word in enumerate(encoding.word_ids(0)):
            if word is None:
                word_ids.append(None)
            elif encoding.sequence_ids(0)[pos] == 0:
                word_ids.append(word)
            else:
                word_ids.append(offset + word)
        return self._run(encoding), word_ids


def resolve_backend(model: str):
    """"debug[:dim=64,layers=1,subword=4]" builds a DebugBackend; anything else
    is treated as a transformers checkpoint path or hub name."""
    if model == "debug" or model.startswith("debug:"):
        options = _parse_options(model.partition(":")[2])
        return DebugBackend(
            dim=options.get("dim", 64),
            num_layers=options.get("layers", 1),
            max_subtoken=options.get("subword", 4),
            max_length=options.get("max_length"),
        )
    return TransformersBackend(model)
