"""End-to-end NER probe: mixed fixed embeddings -> per-token FFN -> linear-chain CRF.

The feed-forward network sees one token position at a time (no sequence
modeling above the frozen embeddings); the CRF only enforces label
consistency. Evaluation is entity-level F1 with one-to-one matching against
gold entities that may carry alternative acceptable spans.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint, crf, trainer
from .corpus import GoldEntity, Span, TaggedSentence, entities_from_bio, repair_bio, split_tag
from .embedstore import EmbeddingRecord, EmbeddingStore, MixWeights, mix, mix_backward
from .errors import ValidationError

_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(np.float64)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


class TagVocabulary:
    """Bidirectional tag label <-> index mapping; must contain exactly one O tag."""

    def __init__(self, labels: Sequence[str]):
        self.labels = tuple(labels)
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("duplicate tag labels")
        if sum(1 for t in self.labels if t == "O") != 1:
            raise ValidationError("tag vocabulary must contain exactly one O tag")
        for label in self.labels:
            split_tag(label)
        self._index = {label: i for i, label in enumerate(self.labels)}

    @classmethod
    def from_sentences(cls, *sentence_lists: Sequence[TaggedSentence]) -> "TagVocabulary":
        seen = {"O"}
        for sentences in sentence_lists:
            for sent in sentences:
                seen.update(sent.tags)
        return cls(["O"] + sorted(seen - {"O"}))

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        if label not in self._index:
            raise ValidationError(f"tag {label!r} not in vocabulary {self.labels}")
        return self._index[label]

    def encode(self, tags: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tags]

    def decode(self, indices: Sequence[int]) -> list[str]:
        return [self.labels[i] for i in indices]


def bio_constraint_masks(tags: TagVocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (start, transition) masks forbidding structurally invalid BIO moves."""
    parsed = [split_tag(label) for label in tags.labels]
    t = len(tags)
    allowed_start = np.array([prefix != "I" for prefix, _ in parsed])
    allowed = np.ones((t, t), dtype=bool)
    for v, (prefix_v, type_v) in enumerate(parsed):
        if prefix_v != "I":
            continue
        for u, (prefix_u, type_u) in enumerate(parsed):
            allowed[u, v] = prefix_u in ("B", "I") and type_u == type_v
    return allowed_start, allowed


@dataclass
class FfnParams:
    """Dense layers applied per token; hidden layers use ``activation``, the last is linear."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ValidationError("FFN needs at least one layer")
        self.layers = [
            (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for w, b in self.layers
        ]
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[0] != self.layers[i - 1][0].shape[1]:
                raise ValidationError(f"layer {i} input dim does not chain from layer {i - 1}")

    @classmethod
    def initialize(
        cls, dims: Sequence[int], activation: str, rng: np.random.Generator
    ) -> "FfnParams":
        """Glorot-uniform weights, zero biases; dims = [input, hidden..., output]."""
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
        return cls(layers, activation)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def copy(self) -> "FfnParams":
        return FfnParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)


def ffn_forward(ffn: FfnParams, x: np.ndarray, want_cache: bool = False):
    """Apply the FFN to each row of x independently; optionally keep backward caches."""
    act, _ = _ACTIVATIONS[ffn.activation]
    a = np.asarray(x, dtype=np.float64)
    cache = []
    last = len(ffn.layers) - 1
    for i, (w, b) in enumerate(ffn.layers):
        z = a @ w + b
        if want_cache:
            cache.append((a, z))
        a = z if i == last else act(z)
    return (a, cache) if want_cache else a


def ffn_backward(ffn: FfnParams, cache, d_out: np.ndarray):
    """Gradients w.r.t. input and every (W, b) given d(loss)/d(output)."""
    _, act_grad = _ACTIVATIONS[ffn.activation]
    d_layers: list[tuple[np.ndarray, np.ndarray]] = [None] * len(ffn.layers)
    delta = np.asarray(d_out, dtype=np.float64)
    for i in range(len(ffn.layers) - 1, -1, -1):
        a_in, z = cache[i]
        if i < len(ffn.layers) - 1:
            delta = delta * act_grad(z)
        w, _ = ffn.layers[i]
        d_layers[i] = (a_in.T @ delta, delta.sum(axis=0))
        delta = delta @ w.T
    return delta, d_layers


@dataclass
class NerProbeModel:
    mix: MixWeights
    ffn: FfnParams
    crf: crf.CrfParams
    tags: TagVocabulary
    constrain_decoding: bool = True

    def __post_init__(self):
        if self.ffn.output_dim != len(self.tags):
            raise ValidationError(
                f"FFN output dim {self.ffn.output_dim} != tag count {len(self.tags)}"
            )
        if self.crf.num_tags != len(self.tags):
            raise ValidationError("CRF size does not match tag vocabulary")


def init_model(
    tag_labels: Sequence[str],
    num_layers: int,
    dim: int,
    hidden_sizes: Sequence[int] = (512, 512),
    activation: str = "relu",
    seed: int = 0,
    constrain_decoding: bool = True,
) -> NerProbeModel:
    """Fresh probe: Glorot FFN, zero CRF scores, uniform layer mix. Deterministic per seed."""
    tags = tag_labels if isinstance(tag_labels, TagVocabulary) else TagVocabulary(tag_labels)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    ffn = FfnParams.initialize([dim, *hidden_sizes, len(tags)], activation, rng)
    return NerProbeModel(
        mix=MixWeights.zeros(num_layers),
        ffn=ffn,
        crf=crf.CrfParams.zeros(len(tags)),
        tags=tags,
        constrain_decoding=constrain_decoding,
    )


def model_params(model: NerProbeModel) -> dict[str, np.ndarray]:
    """Ordered name -> array views over every trainable tensor (shared, not copied)."""
    params = {"mix.raw": model.mix.raw, "mix.log_gamma": model.mix.log_gamma}
    for i, (w, b) in enumerate(model.ffn.layers):
        params[f"ffn.{i}.W"] = w
        params[f"ffn.{i}.b"] = b
    params["crf.transitions"] = model.crf.transitions
    params["crf.start"] = model.crf.start
    params["crf.end"] = model.crf.end
    return params


def _check_record(model: NerProbeModel, record: EmbeddingRecord) -> None:
    if record.num_layers != model.mix.num_layers:
        raise ValidationError(
            f"record {record.id!r}: {record.num_layers} layers, model mixes "
            f"{model.mix.num_layers}"
        )
    if record.dim != model.ffn.input_dim:
        raise ValidationError(
            f"record {record.id!r}: dim {record.dim} != FFN input {model.ffn.input_dim}"
        )


def forward_emissions(model: NerProbeModel, record: EmbeddingRecord) -> np.ndarray:
    """Per-token tag scores (L, T); positions never interact."""
    _check_record(model, record)
    return ffn_forward(model.ffn, mix(record, model.mix))


def loss_and_grad(
    model: NerProbeModel, record: EmbeddingRecord, gold: Sequence[int]
) -> tuple[float, dict[str, np.ndarray]]:
    """CRF negative log-likelihood and gradients for every trainable tensor."""
    _check_record(model, record)
    mixed = mix(record, model.mix)
    emissions, cache = ffn_forward(model.ffn, mixed, want_cache=True)
    loss, crf_grads = crf.nll_and_grad(model.crf, emissions, gold)
    d_mixed, d_layers = ffn_backward(model.ffn, cache, crf_grads.emissions)
    d_raw, d_log_gamma = mix_backward(record, model.mix, d_mixed)

    grads = {"mix.raw": d_raw, "mix.log_gamma": np.asarray(d_log_gamma)}
    for i, (dw, db) in enumerate(d_layers):
        grads[f"ffn.{i}.W"] = dw
        grads[f"ffn.{i}.b"] = db
    grads["crf.transitions"] = crf_grads.transitions
    grads["crf.start"] = crf_grads.start
    grads["crf.end"] = crf_grads.end
    return loss, grads


def decode(model: NerProbeModel, record: EmbeddingRecord) -> list[Span]:
    """Viterbi tags (BIO-constrained by default) converted to entity spans."""
    emissions = forward_emissions(model, record)
    if model.constrain_decoding:
        allowed_start, allowed_trans = bio_constraint_masks(model.tags)
        indices, _ = crf.viterbi(model.crf, emissions, allowed_start, allowed_trans)
    else:
        indices, _ = crf.viterbi(model.crf, emissions)
    labels = repair_bio(model.tags.decode(indices))
    return entities_from_bio(labels)


def decode_corpus(
    model: NerProbeModel,
    sentences: Sequence[TaggedSentence],
    store: EmbeddingStore,
    threads: int = 1,
) -> dict[str, list[Span]]:
    """Decode every sentence; results keyed by sentence id, order-deterministic."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            spans = list(pool.map(lambda s: decode(model, store[s.id]), sentences))
    else:
        spans = [decode(model, store[s.id]) for s in sentences]
    return {s.id: sp for s, sp in zip(sentences, spans)}


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "EvalReport":
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(tp, fp, fn, precision, recall, f1)

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def evaluate(
    predictions: Mapping[str, Sequence[Span]],
    gold: list[GoldEntity],
    sentence_ids: Sequence[str] | None = None,
) -> EvalReport:
    """Entity-level scores with one-to-one greedy matching.

    A prediction is a true positive if its span equals any acceptable span of a
    not-yet-matched gold entity of the same type in the same sentence.
    Predictions are processed sorted by (start, end); primary-span matches are
    preferred over alternative-span matches. When ``sentence_ids`` is given,
    predictions for ids outside it are an error.
    """
    known = set(sentence_ids) if sentence_ids is not None else None
    gold_by_sentence: dict[str, list[GoldEntity]] = {}
    claimed: dict[str, list[bool]] = {}
    for entity in gold:
        gold_by_sentence.setdefault(entity.sentence_id, []).append(entity)
        claimed.setdefault(entity.sentence_id, []).append(False)

    tp = 0
    total_predictions = 0
    for sentence_id in predictions:
        if known is not None and sentence_id not in known:
            raise ValidationError(f"predictions reference unknown sentence {sentence_id!r}")
        candidates = gold_by_sentence.get(sentence_id, [])
        taken = claimed.get(sentence_id, [])
        for span in sorted(predictions[sentence_id], key=lambda s: (s.start, s.end)):
            total_predictions += 1
            key = (span.start, span.end)
            hit = None
            for idx, entity in enumerate(candidates):
                if taken[idx] or entity.label != span.label:
                    continue
                if entity.span == key:
                    hit = idx
                    break
            if hit is None:
                for idx, entity in enumerate(candidates):
                    if taken[idx] or entity.label != span.label:
                        continue
                    if entity.accepts(key):
                        hit = idx
                        break
            if hit is not None:
                taken[hit] = True
                tp += 1
    fp = total_predictions - tp
    fn = len(gold) - tp
    return EvalReport.from_counts(tp, fp, fn)


def _validate_inputs(
    model: NerProbeModel, sentences: Sequence[TaggedSentence], store: EmbeddingStore
) -> None:
    for sent in sentences:
        record = store[sent.id]  # KeyError on missing embedding record
        if record.seq_len != len(sent):
            raise ValidationError(
                f"record {sent.id!r} has {record.seq_len} positions for "
                f"{len(sent)} tokens"
            )
        _check_record(model, record)


def gold_entities_from_sentences(sentences: Sequence[TaggedSentence]) -> list[GoldEntity]:
    return [
        GoldEntity(sent.id, (span.start, span.end), frozenset(), span.label)
        for sent in sentences
        for span in entities_from_bio(sent.tags)
    ]


def train(
    model: NerProbeModel,
    train_sentences: Sequence[TaggedSentence],
    train_store: EmbeddingStore,
    dev_sentences: Sequence[TaggedSentence],
    dev_store: EmbeddingStore,
    config: trainer.TrainConfig,
    seed: int | None = None,
    dev_gold: list[GoldEntity] | None = None,
) -> tuple[NerProbeModel, list[dict]]:
    """Minibatch training on summed NLL; returns the best-dev-F1 snapshot.

    Deterministic given (model initialization, seed): batch order depends only on
    the seed and gradients are reduced in fixed order.
    """
    seed = config.seeds[0] if seed is None else seed
    _validate_inputs(model, train_sentences, train_store)
    _validate_inputs(model, dev_sentences, dev_store)
    if dev_gold is None:
        dev_gold = gold_entities_from_sentences(dev_sentences)

    items = [(train_store[s.id], model.tags.encode(s.tags)) for s in train_sentences]
    params = model_params(model)

    def grad_fn(item):
        record, gold = item
        return loss_and_grad(model, record, gold)

    def dev_metric():
        return evaluate(decode_corpus(model, dev_sentences, dev_store), dev_gold).f1

    _, history = trainer.fit(params, items, grad_fn, dev_metric, config, seed)
    return model, history


@dataclass
class NerExperiment:
    """Everything run_seeds needs for one NER probing experiment."""

    train: Sequence[TaggedSentence]
    dev: Sequence[TaggedSentence]
    test: Sequence[TaggedSentence]
    test_gold: list[GoldEntity] | None = None
    dev_gold: list[GoldEntity] | None = None
    hidden_sizes: tuple[int, ...] = (512, 512)
    activation: str = "relu"
    constrain_decoding: bool = True
    tags: TagVocabulary | None = None


def _split_stores(store) -> tuple[EmbeddingStore, EmbeddingStore, EmbeddingStore]:
    if isinstance(store, EmbeddingStore):
        return store, store, store
    return store["train"], store["dev"], store["test"]


def run_experiment(
    data: NerExperiment, store, config: trainer.TrainConfig, seed: int
) -> tuple[NerProbeModel, dict]:
    """Init + train + test-evaluate one seed; store is one EmbeddingStore or a
    {"train", "dev", "test"} mapping."""
    train_store, dev_store, test_store = _split_stores(store)
    tags = data.tags or TagVocabulary.from_sentences(data.train, data.dev, data.test)
    first = train_store[data.train[0].id]
    model = init_model(
        tags,
        num_layers=first.num_layers,
        dim=first.dim,
        hidden_sizes=data.hidden_sizes,
        activation=data.activation,
        seed=seed,
        constrain_decoding=data.constrain_decoding,
    )
    model, history = train(
        model, data.train, train_store, data.dev, dev_store, config,
        seed=seed, dev_gold=data.dev_gold,
    )
    test_gold = data.test_gold or gold_entities_from_sentences(data.test)
    report = evaluate(decode_corpus(model, data.test, test_store), test_gold)
    metrics = {
        "dev_f1": max((h["dev_metric"] for h in history), default=0.0),
        "epochs_run": len(history),
        **report.as_dict(),
    }
    return model, metrics


def save(model: NerProbeModel, path, extra_meta: dict | None = None) -> None:
    """Write a versioned binary checkpoint (tag vocabulary + all tensors + config echo)."""
    meta = {
        "tags": list(model.tags.labels),
        "activation": model.ffn.activation,
        "constrain_decoding": model.constrain_decoding,
        "num_layers": model.mix.num_layers,
        "dim": model.ffn.input_dim,
        "hidden_sizes": [w.shape[1] for w, _ in model.ffn.layers[:-1]],
    }
    meta.update(extra_meta or {})
    checkpoint.save_checkpoint(path, "ner", meta, model_params(model))


def load(path) -> tuple[NerProbeModel, dict]:
    kind, meta, params = checkpoint.load_checkpoint(path)
    if kind != "ner":
        raise ValidationError(f"{path}: expected an NER checkpoint, found {kind!r}")
    tags = TagVocabulary(meta["tags"])
    num_ffn_layers = len(meta["hidden_sizes"]) + 1
    layers = [
        (params[f"ffn.{i}.W"], params[f"ffn.{i}.b"]) for i in range(num_ffn_layers)
    ]
    model = NerProbeModel(
        mix=MixWeights(params["mix.raw"], params["mix.log_gamma"]),
        ffn=FfnParams(layers, meta["activation"]),
        crf=crf.CrfParams(params["crf.transitions"], params["crf.start"], params["crf.end"]),
        tags=tags,
        constrain_decoding=bool(meta["constrain_decoding"]),
    )
    return model, meta
