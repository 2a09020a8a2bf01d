"""Input corpora: BIO-tagged sentences, NLI sentence pairs, relation annotations.

File formats (all UTF-8):
  * tagged corpus: one ``TOKEN<TAB>TAG`` per line, blank line between sentences;
  * alternative gold spans: ``sent_id<TAB>gold_start<TAB>gold_end<TAB>alt_start<TAB>alt_end``;
  * NLI pairs / relation annotations: one JSON object per line.

Spans are token offsets with exclusive end. Parsing is pure; parsed corpora
are treated as immutable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .errors import ParseError, ValidationError

NLI_LABELS = ("entailment", "contradiction", "neutral")
RELATION_TYPES = ("disease-symptom", "disease-drug", "number-indication", "synonyms")


class Span(NamedTuple):
    """A token-offset entity span; ``label`` is None for untyped (bare B/I) tags."""

    start: int
    end: int
    label: str | None = None


def split_tag(tag: str) -> tuple[str, str | None]:
    """Split ``B-GENE`` into ``("B", "GENE")``; bare ``B``/``I``/``O`` have type None."""
    if tag in ("O", "B", "I"):
        return tag, None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in ("B", "I"):
        return tag[0], tag[2:]
    raise ValidationError(f"invalid BIO tag {tag!r}")


def validate_bio(tags: list[str], context: str = "") -> None:
    """Raise ValidationError unless every I-X is preceded by B-X or I-X of type X."""
    prev_prefix, prev_type = "O", None
    for tag in tags:
        prefix, etype = split_tag(tag)
        if prefix == "I" and not (prev_prefix in ("B", "I") and prev_type == etype):
            where = f" in {context}" if context else ""
            raise ValidationError(f"invalid BIO transition {prev_prefix!r} -> {tag!r}{where}")
        prev_prefix, prev_type = prefix, etype


def repair_bio(tags: list[str]) -> list[str]:
    """Repair a predicted tag sequence: a dangling I-X becomes B-X (CoNLL-eval behavior)."""
    repaired = []
    prev_prefix, prev_type = "O", None
    for tag in tags:
        prefix, etype = split_tag(tag)
        if prefix == "I" and not (prev_prefix in ("B", "I") and prev_type == etype):
            prefix = "B"
            tag = "B" if etype is None else f"B-{etype}"
        repaired.append(tag)
        prev_prefix, prev_type = prefix, etype
    return repaired


def entities_from_bio(tags: list[str]) -> list[Span]:
    """Extract maximal B,I... runs as spans. The sequence must be BIO-valid."""
    validate_bio(tags)
    spans: list[Span] = []
    start, etype = None, None
    for i, tag in enumerate(tags):
        prefix, tag_type = split_tag(tag)
        if prefix != "I" and start is not None:
            spans.append(Span(start, i, etype))
            start = None
        if prefix == "B":
            start, etype = i, tag_type
    if start is not None:
        spans.append(Span(start, len(tags), etype))
    return spans


def bio_from_entities(entities: Iterable[Span], length: int) -> list[str]:
    """Inverse of entities_from_bio for non-overlapping spans within [0, length)."""
    tags = ["O"] * length
    occupied = [False] * length
    for span in entities:
        start, end, etype = span
        if not (0 <= start < end <= length):
            raise ValidationError(f"span {(start, end)} out of bounds for length {length}")
        if any(occupied[start:end]):
            raise ValidationError(f"span {(start, end)} overlaps another entity")
        for i in range(start, end):
            occupied[i] = True
        tags[start] = "B" if etype is None else f"B-{etype}"
        for i in range(start + 1, end):
            tags[i] = "I" if etype is None else f"I-{etype}"
    return tags


@dataclass(frozen=True)
class TaggedSentence:
    id: str
    tokens: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValidationError(f"sentence {self.id!r} is empty")
        if len(self.tokens) != len(self.tags):
            raise ValidationError(
                f"sentence {self.id!r}: {len(self.tokens)} tokens but {len(self.tags)} tags"
            )
        validate_bio(self.tags, context=f"sentence {self.id!r}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class GoldEntity:
    """A gold span plus the full set of acceptable spans (always includes the primary)."""

    sentence_id: str
    span: tuple[int, int]
    alternatives: frozenset[tuple[int, int]] = field(default_factory=frozenset)
    label: str | None = None

    def __post_init__(self):
        start, end = self.span
        if not (0 <= start < end):
            raise ValidationError(f"bad span {self.span} for entity in {self.sentence_id!r}")
        object.__setattr__(self, "alternatives", frozenset(self.alternatives) | {self.span})

    def accepts(self, span: tuple[int, int]) -> bool:
        return tuple(span) in self.alternatives


@dataclass(frozen=True)
class NliPair:
    id: str
    premise_tokens: list[str]
    hypothesis_tokens: list[str]
    label: str

    def __post_init__(self):
        if not self.premise_tokens or not self.hypothesis_tokens:
            raise ValidationError(f"pair {self.id!r} has an empty sentence")
        if self.label not in NLI_LABELS:
            raise ValidationError(f"pair {self.id!r}: unknown label {self.label!r}")


@dataclass(frozen=True)
class RelationAnnotation:
    """A (premise token, hypothesis token, relation type) triple on an NLI pair."""

    pair_id: str
    premise_index: int
    hypothesis_index: int
    relation_type: str

    def __post_init__(self):
        if self.relation_type not in RELATION_TYPES:
            raise ValidationError(
                f"annotation on {self.pair_id!r}: unknown relation type {self.relation_type!r}"
            )


def parse_tagged_corpus(
    path, alt_path=None
) -> tuple[list[TaggedSentence], list[GoldEntity]]:
    """Parse a BIO-tagged corpus, deriving gold entities from the tags.

    Sentences get ids "s0", "s1", ... in file order. When ``alt_path`` is given,
    each of its lines attaches an alternative acceptable span to the gold entity
    whose primary span matches.
    """
    sentences: list[TaggedSentence] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        if tokens:
            sid = f"s{len(sentences)}"
            sentences.append(TaggedSentence(sid, list(tokens), list(tags)))
            tokens.clear()
            tags.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ParseError(f"{path}:{lineno}: expected 'TOKEN<TAB>TAG', got {line!r}")
            try:
                split_tag(parts[1])
            except ValidationError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            tokens.append(parts[0])
            tags.append(parts[1])
    flush()

    by_id = {s.id: s for s in sentences}
    primary: dict[tuple[str, tuple[int, int]], tuple[str | None, set[tuple[int, int]]]] = {}
    order: list[tuple[str, tuple[int, int]]] = []
    for sent in sentences:
        for span in entities_from_bio(sent.tags):
            key = (sent.id, (span.start, span.end))
            primary[key] = (span.label, set())
            order.append(key)

    if alt_path is not None:
        with open(alt_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 5:
                    raise ParseError(f"{alt_path}:{lineno}: expected 5 tab-separated fields")
                sid = parts[0]
                try:
                    g0, g1, a0, a1 = (int(p) for p in parts[1:])
                except ValueError as exc:
                    raise ParseError(f"{alt_path}:{lineno}: non-integer offset") from exc
                if sid not in by_id:
                    raise ValidationError(f"{alt_path}:{lineno}: unknown sentence {sid!r}")
                key = (sid, (g0, g1))
                if key not in primary:
                    raise ValidationError(
                        f"{alt_path}:{lineno}: no gold entity {g0, g1} in sentence {sid!r}"
                    )
                if not (0 <= a0 < a1 <= len(by_id[sid])):
                    raise ValidationError(
                        f"{alt_path}:{lineno}: alternative span {a0, a1} out of bounds"
                    )
                primary[key][1].add((a0, a1))

    entities = [
        GoldEntity(sid, span, frozenset(primary[(sid, span)][1]), primary[(sid, span)][0])
        for sid, span in order
    ]
    return sentences, entities


def write_tagged_corpus(sentences: Iterable[TaggedSentence], path) -> None:
    """Serialize sentences back to the TOKEN<TAB>TAG line format."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, sent in enumerate(sentences):
            if i:
                fh.write("\n")
            for token, tag in zip(sent.tokens, sent.tags):
                fh.write(f"{token}\t{tag}\n")


def _parse_jsonl(path, required_keys: tuple[str, ...]):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise ParseError(f"{path}:{lineno}: expected an object")
            missing = [k for k in required_keys if k not in record]
            if missing:
                raise ParseError(f"{path}:{lineno}: missing keys {missing}")
            yield lineno, record


def parse_nli_corpus(path) -> list[NliPair]:
    """Parse newline-delimited NLI records with keys id/premise_tokens/hypothesis_tokens/label."""
    pairs = []
    for lineno, rec in _parse_jsonl(path, ("id", "premise_tokens", "hypothesis_tokens", "label")):
        try:
            pairs.append(
                NliPair(
                    id=str(rec["id"]),
                    premise_tokens=[str(t) for t in rec["premise_tokens"]],
                    hypothesis_tokens=[str(t) for t in rec["hypothesis_tokens"]],
                    label=rec["label"],
                )
            )
        except TypeError as exc:
            raise ParseError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return pairs


def write_nli_corpus(pairs: Iterable[NliPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(
                json.dumps(
                    {
                        "id": p.id,
                        "premise_tokens": p.premise_tokens,
                        "hypothesis_tokens": p.hypothesis_tokens,
                        "label": p.label,
                    }
                )
                + "\n"
            )


def parse_relation_annotations(path, pairs: list[NliPair]) -> list[RelationAnnotation]:
    """Parse annotated token pairs and validate indices against the referenced pairs."""
    by_id = {p.id: p for p in pairs}
    annotations = []
    for lineno, rec in _parse_jsonl(
        path, ("pair_id", "premise_index", "hypothesis_index", "relation_type")
    ):
        ann = RelationAnnotation(
            pair_id=str(rec["pair_id"]),
            premise_index=int(rec["premise_index"]),
            hypothesis_index=int(rec["hypothesis_index"]),
            relation_type=rec["relation_type"],
        )
        pair = by_id.get(ann.pair_id)
        if pair is None:
            raise ValidationError(f"{path}:{lineno}: unknown pair id {ann.pair_id!r}")
        if not (0 <= ann.premise_index < len(pair.premise_tokens)):
            raise ValidationError(
                f"{path}:{lineno}: premise index {ann.premise_index} out of range "
                f"for pair {ann.pair_id!r}"
            )
        if not (0 <= ann.hypothesis_index < len(pair.hypothesis_tokens)):
            raise ValidationError(
                f"{path}:{lineno}: hypothesis index {ann.hypothesis_index} out of range "
                f"for pair {ann.pair_id!r}"
            )
        annotations.append(ann)
    return annotations


def write_relation_annotations(annotations: Iterable[RelationAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            fh.write(
                json.dumps(
                    {
                        "pair_id": a.pair_id,
                        "premise_index": a.premise_index,
                        "hypothesis_index": a.hypothesis_index,
                        "relation_type": a.relation_type,
                    }
                )
                + "\n"
            )
