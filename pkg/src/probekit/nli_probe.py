"""NLI probe: bilinear relation scores between premise/hypothesis tokens,
element-wise max pooling, linear softmax over the three entailment labels.

For premise matrix P (L1 x D) and hypothesis matrix H (L2 x D), each of the R
bilinear maps produces S_r = P W_r H^T; the vector (S_1[i,j], ..., S_R[i,j]) is
the distributed relation representation of token pair (i, j), and the pooled
vector max_{i,j} over pairs feeds the label layer. Gradients flow through the
pool to exactly the (first, row-major) argmax pair per component.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint, trainer
from .corpus import NLI_LABELS, NliPair, RelationAnnotation
from .embedstore import (
    EmbeddingRecord,
    EmbeddingStore,
    MixWeights,
    mix,
    mix_backward,
    write_store,
    read_store,
)
from .errors import ValidationError

LABEL_INDEX = {label: i for i, label in enumerate(NLI_LABELS)}


@dataclass
class BilinearParams:
    """R bilinear maps (R, D, D) plus per-label weight vectors (3, R) and biases (3,)."""

    w: np.ndarray
    label_w: np.ndarray
    label_b: np.ndarray
    use_bias: bool = True

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.label_w = np.asarray(self.label_w, dtype=np.float64)
        self.label_b = np.asarray(self.label_b, dtype=np.float64)
        if self.w.ndim != 3 or self.w.shape[1] != self.w.shape[2] or self.w.shape[0] < 1:
            raise ValidationError(f"bilinear tensor must be (R, D, D), got {self.w.shape}")
        r = self.w.shape[0]
        if self.label_w.shape != (3, r) or self.label_b.shape != (3,):
            raise ValidationError(
                f"label layer shapes {self.label_w.shape}/{self.label_b.shape} "
                f"do not match R={r}"
            )
        for name, arr in (("W", self.w), ("label_w", self.label_w), ("label_b", self.label_b)):
            if not np.isfinite(arr).all():
                raise ValidationError(f"bilinear {name} contains non-finite values")

    @property
    def rank(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]


@dataclass
class NliProbeModel:
    """Premise/hypothesis layer mixes (tied by default: the same object) + bilinear head."""

    mix_p: MixWeights
    mix_h: MixWeights
    bilinear: BilinearParams

    def __post_init__(self):
        if self.mix_p.num_layers != self.mix_h.num_layers:
            raise ValidationError("premise/hypothesis mixes must have equal layer counts")

    @property
    def tied(self) -> bool:
        return self.mix_p is self.mix_h


def init_model(
    num_layers: int,
    dim: int,
    rank: int = 128,
    seed: int = 0,
    tied: bool = True,
    use_bias: bool = True,
) -> NliProbeModel:
    """Fresh probe; W_r starts near a scaled identity so initial relation scores
    track embedding similarity rather than random bilinear noise."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    w = 0.1 * np.broadcast_to(np.eye(dim), (rank, dim, dim)) + rng.uniform(
        -0.01, 0.01, size=(rank, dim, dim)
    )
    bilinear = BilinearParams(w, np.zeros((3, rank)), np.zeros(3), use_bias=use_bias)
    mix_p = MixWeights.zeros(num_layers)
    mix_h = mix_p if tied else MixWeights.zeros(num_layers)
    return NliProbeModel(mix_p=mix_p, mix_h=mix_h, bilinear=bilinear)


def model_params(model: NliProbeModel) -> dict[str, np.ndarray]:
    """Trainable tensors as shared views; tied mixes appear once."""
    params = {"mix_p.raw": model.mix_p.raw, "mix_p.log_gamma": model.mix_p.log_gamma}
    if not model.tied:
        params["mix_h.raw"] = model.mix_h.raw
        params["mix_h.log_gamma"] = model.mix_h.log_gamma
    params["bilinear.W"] = model.bilinear.w
    params["bilinear.label_w"] = model.bilinear.label_w
    if model.bilinear.use_bias:
        params["bilinear.label_b"] = model.bilinear.label_b
    return params


def _check_matrices(model: NliProbeModel, p: np.ndarray, h: np.ndarray):
    p = np.asarray(p, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = model.bilinear.dim
    if p.ndim != 2 or h.ndim != 2 or p.shape[1] != d or h.shape[1] != d:
        raise ValidationError(
            f"premise {p.shape} / hypothesis {h.shape} must both have column dim {d}"
        )
    return p, h


def relation_tensor(model: NliProbeModel, p: np.ndarray, h: np.ndarray) -> np.ndarray:
    """S with S[r, i, j] = p_i . W_r . h_j, shape (R, L1, L2)."""
    p, h = _check_matrices(model, p, h)
    return np.einsum("id,rde,je->rij", p, model.bilinear.w, h, optimize=True)


def relation_rep(s: np.ndarray, i: int, j: int) -> np.ndarray:
    """The length-R relation representation of token pair (i, j)."""
    if not (0 <= i < s.shape[1] and 0 <= j < s.shape[2]):
        raise ValidationError(f"pair index {(i, j)} out of range for tensor {s.shape}")
    return np.array(s[:, i, j], dtype=np.float64)


def max_pool(s: np.ndarray) -> np.ndarray:
    """Element-wise maximum over all token pairs: component r is max_{i,j} S[r,i,j]."""
    return np.asarray(s, dtype=np.float64).max(axis=(1, 2))


def _max_pool_with_argmax(s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, l1, l2 = s.shape
    flat = s.reshape(r, l1 * l2)
    idx = flat.argmax(axis=1)  # first argmax in row-major (i, then j) order
    rows, cols = np.divmod(idx, l2)
    return flat[np.arange(r), idx], rows, cols


@dataclass
class HeadGrads:
    """Gradients of one pair's loss w.r.t. the head parameters and the two inputs."""

    w: np.ndarray
    label_w: np.ndarray
    label_b: np.ndarray
    p: np.ndarray
    h: np.ndarray


def logits_and_loss(
    model: NliProbeModel, p: np.ndarray, h: np.ndarray, label: str
) -> tuple[np.ndarray, float, HeadGrads]:
    """Label logits, softmax cross-entropy, and the full analytic gradient.

    The max pool routes gradient to one (i*, j*) pair per component r, so
    d(loss)/dW_r is the outer product of the winning premise and hypothesis rows.
    """
    if label not in LABEL_INDEX:
        raise ValidationError(f"unknown NLI label {label!r}")
    p, h = _check_matrices(model, p, h)
    s = np.einsum("id,rde,je->rij", p, model.bilinear.w, h, optimize=True)
    pooled, rows, cols = _max_pool_with_argmax(s)

    logits = model.bilinear.label_w @ pooled + model.bilinear.label_b
    shifted = logits - logits.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    loss = -float(log_probs[LABEL_INDEX[label]])

    d_logits = np.exp(log_probs)
    d_logits[LABEL_INDEX[label]] -= 1.0
    d_label_w = np.outer(d_logits, pooled)
    d_label_b = d_logits.copy()
    d_pooled = model.bilinear.label_w.T @ d_logits  # (R,)

    d_w = np.zeros_like(model.bilinear.w)
    d_p = np.zeros_like(p)
    d_h = np.zeros_like(h)
    w = model.bilinear.w
    for r in range(model.bilinear.rank):
        i, j = int(rows[r]), int(cols[r])
        g = d_pooled[r]
        if g == 0.0:
            continue
        d_w[r] = g * np.outer(p[i], h[j])
        d_p[i] += g * (w[r] @ h[j])
        d_h[j] += g * (w[r].T @ p[i])
    return logits, loss, HeadGrads(d_w, d_label_w, d_label_b, d_p, d_h)


def predict(model: NliProbeModel, p: np.ndarray, h: np.ndarray) -> str:
    """Argmax label; ties break toward the earlier label in (entailment,
    contradiction, neutral) order."""
    p, h = _check_matrices(model, p, h)
    s = np.einsum("id,rde,je->rij", p, model.bilinear.w, h, optimize=True)
    logits = model.bilinear.label_w @ max_pool(s) + model.bilinear.label_b
    return NLI_LABELS[int(np.argmax(logits))]


def _pair_records(pair: NliPair, store: EmbeddingStore) -> tuple[EmbeddingRecord, EmbeddingRecord]:
    rec_p = store[f"{pair.id}/p"]
    rec_h = store[f"{pair.id}/h"]
    if rec_p.seq_len != len(pair.premise_tokens):
        raise ValidationError(
            f"record {rec_p.id!r} has {rec_p.seq_len} positions for "
            f"{len(pair.premise_tokens)} premise tokens"
        )
    if rec_h.seq_len != len(pair.hypothesis_tokens):
        raise ValidationError(
            f"record {rec_h.id!r} has {rec_h.seq_len} positions for "
            f"{len(pair.hypothesis_tokens)} hypothesis tokens"
        )
    return rec_p, rec_h


def pair_loss_and_grad(
    model: NliProbeModel, rec_p: EmbeddingRecord, rec_h: EmbeddingRecord, label: str
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for every trainable tensor, including the layer mixes."""
    p = mix(rec_p, model.mix_p)
    h = mix(rec_h, model.mix_h)
    _, loss, head = logits_and_loss(model, p, h, label)
    d_raw_p, d_lg_p = mix_backward(rec_p, model.mix_p, head.p)
    d_raw_h, d_lg_h = mix_backward(rec_h, model.mix_h, head.h)

    grads: dict[str, np.ndarray] = {}
    if model.tied:
        grads["mix_p.raw"] = d_raw_p + d_raw_h
        grads["mix_p.log_gamma"] = np.asarray(d_lg_p + d_lg_h)
    else:
        grads["mix_p.raw"] = d_raw_p
        grads["mix_p.log_gamma"] = np.asarray(d_lg_p)
        grads["mix_h.raw"] = d_raw_h
        grads["mix_h.log_gamma"] = np.asarray(d_lg_h)
    grads["bilinear.W"] = head.w
    grads["bilinear.label_w"] = head.label_w
    if model.bilinear.use_bias:
        grads["bilinear.label_b"] = head.label_b
    return loss, grads


def predict_pair(model: NliProbeModel, pair: NliPair, store: EmbeddingStore) -> str:
    rec_p, rec_h = _pair_records(pair, store)
    return predict(model, mix(rec_p, model.mix_p), mix(rec_h, model.mix_h))


def accuracy(model: NliProbeModel, pairs: Sequence[NliPair], store: EmbeddingStore) -> float:
    if not pairs:
        raise ValidationError("cannot compute accuracy over zero pairs")
    correct = sum(1 for pair in pairs if predict_pair(model, pair, store) == pair.label)
    return correct / len(pairs)


def train(
    model: NliProbeModel,
    train_pairs: Sequence[NliPair],
    train_store: EmbeddingStore,
    dev_pairs: Sequence[NliPair],
    dev_store: EmbeddingStore,
    config: trainer.TrainConfig,
    seed: int | None = None,
) -> tuple[NliProbeModel, list[dict]]:
    """Minibatch cross-entropy training; returns the best-dev-accuracy snapshot."""
    seed = config.seeds[0] if seed is None else seed
    items = [(*_pair_records(pair, train_store), pair.label) for pair in train_pairs]
    for pair in dev_pairs:
        _pair_records(pair, dev_store)
    params = model_params(model)

    def grad_fn(item):
        rec_p, rec_h, label = item
        return pair_loss_and_grad(model, rec_p, rec_h, label)

    def dev_metric():
        return accuracy(model, dev_pairs, dev_store)

    _, history = trainer.fit(params, items, grad_fn, dev_metric, config, seed)
    return model, history


@dataclass(frozen=True)
class RelationRep:
    """A relation representation tagged with where it came from."""

    vector: np.ndarray
    pair_id: str
    premise_index: int
    hypothesis_index: int
    relation_type: str | None = None


def extract_relation_reps(
    model: NliProbeModel,
    annotations: Sequence[RelationAnnotation],
    store: EmbeddingStore,
    pairs: Sequence[NliPair] | None = None,
) -> list[RelationRep]:
    """Relation representations at every annotated (premise, hypothesis) token pair.

    The relation tensor is computed once per distinct pair id; annotations keep
    their input order in the result.
    """
    tensors: dict[str, np.ndarray] = {}
    reps = []
    for ann in annotations:
        if ann.pair_id not in tensors:
            rec_p = store[f"{ann.pair_id}/p"]
            rec_h = store[f"{ann.pair_id}/h"]
            tensors[ann.pair_id] = relation_tensor(
                model, mix(rec_p, model.mix_p), mix(rec_h, model.mix_h)
            )
        vector = relation_rep(tensors[ann.pair_id], ann.premise_index, ann.hypothesis_index)
        reps.append(
            RelationRep(
                vector=vector,
                pair_id=ann.pair_id,
                premise_index=ann.premise_index,
                hypothesis_index=ann.hypothesis_index,
                relation_type=ann.relation_type,
            )
        )
    return reps


def write_relation_reps(reps: Sequence[RelationRep], store_path, sidecar_path) -> None:
    """Persist reps as a PTE-style store (ids "pair:i:j", K=1, L=1, D=R) plus a
    newline-delimited sidecar carrying the relation types."""
    records = [
        EmbeddingRecord(
            f"{rep.pair_id}:{rep.premise_index}:{rep.hypothesis_index}",
            rep.vector.astype(np.float32).reshape(1, 1, -1),
        )
        for rep in reps
    ]
    write_store(records, store_path)
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        for rep in reps:
            fh.write(
                json.dumps(
                    {
                        "id": f"{rep.pair_id}:{rep.premise_index}:{rep.hypothesis_index}",
                        "pair_id": rep.pair_id,
                        "premise_index": rep.premise_index,
                        "hypothesis_index": rep.hypothesis_index,
                        "relation_type": rep.relation_type,
                    }
                )
                + "\n"
            )


def read_relation_reps(store_path, sidecar_path) -> list[RelationRep]:
    store = read_store(store_path)
    reps = []
    with open(sidecar_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            meta = json.loads(line)
            record = store[meta["id"]]
            reps.append(
                RelationRep(
                    vector=record.values.reshape(-1).astype(np.float64),
                    pair_id=meta["pair_id"],
                    premise_index=int(meta["premise_index"]),
                    hypothesis_index=int(meta["hypothesis_index"]),
                    relation_type=meta.get("relation_type"),
                )
            )
    return reps


@dataclass
class NliExperiment:
    """Everything run_seeds needs for one NLI probing experiment."""

    train: Sequence[NliPair]
    dev: Sequence[NliPair]
    test: Sequence[NliPair]
    rank: int = 128
    tied: bool = True
    use_bias: bool = True


def _split_stores(store):
    if isinstance(store, EmbeddingStore):
        return store, store, store
    return store["train"], store["dev"], store["test"]


def run_experiment(
    data: NliExperiment, store, config: trainer.TrainConfig, seed: int
) -> tuple[NliProbeModel, dict]:
    train_store, dev_store, test_store = _split_stores(store)
    first = train_store[f"{data.train[0].id}/p"]
    model = init_model(
        num_layers=first.num_layers,
        dim=first.dim,
        rank=data.rank,
        seed=seed,
        tied=data.tied,
        use_bias=data.use_bias,
    )
    model, history = train(
        model, data.train, train_store, data.dev, dev_store, config, seed=seed
    )
    metrics = {
        "dev_accuracy": max((h["dev_metric"] for h in history), default=0.0),
        "epochs_run": len(history),
        "accuracy": accuracy(model, data.test, test_store),
        "n_test": len(data.test),
    }
    return model, metrics


def save(model: NliProbeModel, path, extra_meta: dict | None = None) -> None:
    meta = {
        "labels": list(NLI_LABELS),
        "rank": model.bilinear.rank,
        "dim": model.bilinear.dim,
        "num_layers": model.mix_p.num_layers,
        "tied": model.tied,
        "use_bias": model.bilinear.use_bias,
    }
    meta.update(extra_meta or {})
    params = dict(model_params(model))
    if not model.bilinear.use_bias:
        params["bilinear.label_b"] = model.bilinear.label_b
    checkpoint.save_checkpoint(path, "nli", meta, params)


def load(path) -> tuple[NliProbeModel, dict]:
    kind, meta, params = checkpoint.load_checkpoint(path)
    if kind != "nli":
        raise ValidationError(f"{path}: expected an NLI checkpoint, found {kind!r}")
    mix_p = MixWeights(params["mix_p.raw"], params["mix_p.log_gamma"])
    if meta["tied"]:
        mix_h = mix_p
    else:
        mix_h = MixWeights(params["mix_h.raw"], params["mix_h.log_gamma"])
    bilinear = BilinearParams(
        params["bilinear.W"],
        params["bilinear.label_w"],
        params["bilinear.label_b"],
        use_bias=bool(meta["use_bias"]),
    )
    return NliProbeModel(mix_p=mix_p, mix_h=mix_h, bilinear=bilinear), meta
