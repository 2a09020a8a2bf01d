"""Nearest-neighbor analysis of relation representations plus small statistics.

For each annotated relation representation, we ask what fraction of its k
nearest neighbors (self excluded) carry the same relation type, then aggregate
per type and over all items. The overall proportion is the mean over items,
not the mean of per-type means. Raw neighbor counts are kept so two embedding
schemes can be compared with a two-proportion z-test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .nli_probe import RelationRep


@dataclass(frozen=True)
class NnReport:
    """Same-type nearest-neighbor proportions, per relation type and overall."""

    per_type: dict[str, float]
    overall: float
    k: int
    metric: str
    # per type: (same-type neighbor slots, total neighbor slots = k * items of that type)
    counts: dict[str, tuple[int, int]]

    def as_dict(self) -> dict:
        return {
            "per_type": dict(self.per_type),
            "overall": self.overall,
            "k": self.k,
            "metric": self.metric,
            "counts": {t: list(c) for t, c in self.counts.items()},
        }


def _pairwise_distances(x: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0):
            raise ValidationError("cosine metric is undefined for zero vectors")
        sims = (x @ x.T) / np.outer(norms, norms)
        return 1.0 - sims
    if metric == "euclidean":
        sq = np.sum(x * x, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
        return np.sqrt(np.clip(d2, 0.0, None))
    raise ValidationError(f"unknown metric {metric!r}; expected 'cosine' or 'euclidean'")


def knn_same_type(reps: Sequence[RelationRep], k: int = 5, metric: str = "cosine") -> NnReport:
    """Proportion of each item's k nearest neighbors sharing its relation type.

    Neighbors exclude the item itself; distance ties at the k-th neighbor are
    broken by stable input order.
    """
    n = len(reps)
    if n < 2:
        raise ValidationError("nearest-neighbor analysis needs at least 2 representations")
    if not (1 <= k < n):
        raise ValidationError(f"k must satisfy 1 <= k < {n}, got {k}")
    types = [rep.relation_type for rep in reps]
    if any(t is None for t in types):
        raise ValidationError("every representation must carry a relation type")

    x = np.stack([np.asarray(rep.vector, dtype=np.float64) for rep in reps])
    distances = _pairwise_distances(x, metric)

    type_array = np.array(types)
    same_fraction = np.empty(n)
    same_counts: dict[str, int] = {}
    total_counts: dict[str, int] = {}
    for i in range(n):
        order = np.argsort(distances[i], kind="stable")
        neighbors = [j for j in order if j != i][:k]
        same = int(np.sum(type_array[neighbors] == types[i]))
        same_fraction[i] = same / k
        same_counts[types[i]] = same_counts.get(types[i], 0) + same
        total_counts[types[i]] = total_counts.get(types[i], 0) + k

    per_type = {t: same_counts[t] / total_counts[t] for t in sorted(total_counts)}
    counts = {t: (same_counts[t], total_counts[t]) for t in sorted(total_counts)}
    return NnReport(
        per_type=per_type,
        overall=float(same_fraction.mean()),
        k=k,
        metric=metric,
        counts=counts,
    )


def mean_nn_reports(reports: Sequence[NnReport]) -> NnReport:
    """Arithmetic mean over (typically per-seed) reports; k and metric must agree."""
    if not reports:
        raise ValidationError("no reports to average")
    if len({(r.k, r.metric) for r in reports}) != 1:
        raise ValidationError("cannot average reports with differing k or metric")
    all_types = sorted({t for r in reports for t in r.per_type})
    per_type = {}
    counts = {}
    for t in all_types:
        values = [r.per_type[t] for r in reports if t in r.per_type]
        per_type[t] = float(np.mean(values))
        same = sum(r.counts[t][0] for r in reports if t in r.counts)
        total = sum(r.counts[t][1] for r in reports if t in r.counts)
        counts[t] = (same, total)
    return NnReport(
        per_type=per_type,
        overall=float(np.mean([r.overall for r in reports])),
        k=reports[0].k,
        metric=reports[0].metric,
        counts=counts,
    )


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValidationError(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValidationError("need at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        raise ValidationError("zero variance in at least one input")
    return float(dx @ dy) / denom


def subset_accuracy(
    predictions: Mapping[str, str], annotated_pair_ids: Iterable[str], gold: Mapping[str, str]
) -> float:
    """Accuracy restricted to the annotated subset of instances."""
    ids = list(dict.fromkeys(annotated_pair_ids))
    if not ids:
        raise ValidationError("empty annotated subset")
    missing = [i for i in ids if i not in predictions]
    if missing:
        raise ValidationError(f"missing predictions for annotated pairs: {missing[:5]}")
    correct = sum(1 for i in ids if predictions[i] == gold[i])
    return correct / len(ids)


def two_proportion_z_test(
    successes_a: int, total_a: int, successes_b: int, total_b: int
) -> tuple[float, float]:
    """Pooled two-proportion z statistic and two-sided p-value on raw counts."""
    if total_a < 1 or total_b < 1:
        raise ValidationError("totals must be positive")
    if not (0 <= successes_a <= total_a and 0 <= successes_b <= total_b):
        raise ValidationError("success counts out of range")
    p_a = successes_a / total_a
    p_b = successes_b / total_b
    pooled = (successes_a + successes_b) / (total_a + total_b)
    denom = math.sqrt(pooled * (1.0 - pooled) * (1.0 / total_a + 1.0 / total_b))
    if denom == 0.0:
        return 0.0, 1.0
    z = (p_a - p_b) / denom
    p_value = math.erfc(abs(z) / math.sqrt(2.0))
    return z, p_value


def compare_nn_reports(a: NnReport, b: NnReport) -> dict[str, tuple[float, float]]:
    """Per-type (z, p) comparing raw same-type neighbor counts of two reports."""
    out = {}
    for t in sorted(set(a.counts) & set(b.counts)):
        out[t] = two_proportion_z_test(*a.counts[t], *b.counts[t])
    return out


def export_vectors(
    vectors: Sequence[np.ndarray],
    path,
    ids: Sequence[str] | None = None,
    labels: Sequence[str | None] | None = None,
    tags: Sequence[Mapping[str, str]] | None = None,
) -> None:
    """Write a tab-separated table (header + one vector per row) for external
    projection tools; metadata cells are empty strings when absent."""
    if not vectors:
        raise ValidationError("nothing to export")
    dim = len(vectors[0])
    if any(len(v) != dim for v in vectors):
        raise ValidationError("vectors must all have the same length")
    n = len(vectors)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    labels = list(labels) if labels is not None else [None] * n
    tags = [dict(t) for t in tags] if tags is not None else [{} for _ in range(n)]
    if not (len(ids) == len(labels) == len(tags) == n):
        raise ValidationError("ids/labels/tags must align with vectors")

    tag_keys = sorted({key for t in tags for key in t})
    header = ["id", "label", *tag_keys, *[f"v{i}" for i in range(dim)]]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for vec, rid, label, tag in zip(vectors, ids, labels, tags):
            row = [rid, label if label is not None else ""]
            row += [str(tag.get(key, "")) for key in tag_keys]
            row += [format(float(v), ".17g") for v in vec]
            fh.write("\t".join(row) + "\n")


def read_vector_table(path):
    """Inverse of export_vectors; returns (vectors, ids, labels, tags)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        first_value = next(i for i, name in enumerate(header) if name == "v0")
        tag_keys = header[2:first_value]
        vectors, ids, labels, tags = [], [], [], []
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            ids.append(cells[0])
            labels.append(cells[1] or None)
            tags.append({k: v for k, v in zip(tag_keys, cells[2:first_value])})
            vectors.append(np.array([float(c) for c in cells[first_value:]]))
    return vectors, ids, labels, tags
