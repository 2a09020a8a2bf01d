"""Shared synthetic fixtures: separable corpora with one-hot-informative embeddings."""

import numpy as np
import pytest

from probekit.corpus import NliPair, TaggedSentence
from probekit.embedstore import EmbeddingRecord, EmbeddingStore

NER_TAGS = ("O", "B", "I")


def make_ner_corpus(n, seed, noise=0.05, num_layers=2, id_prefix="s"):
    """Sentences whose embeddings are one-hot of the gold tag plus Gaussian noise.

    Every layer carries the signal, so any mix weighting stays separable.
    """
    rng = np.random.default_rng(seed)
    sentences, records = [], []
    for i in range(n):
        length = int(rng.integers(4, 9))
        tags = ["O"] * length
        pos = 0
        for _ in range(int(rng.integers(1, 3))):
            if pos >= length:
                break
            start = int(rng.integers(pos, length))
            end = min(start + int(rng.integers(1, 4)), length)
            tags[start] = "B"
            for j in range(start + 1, end):
                tags[j] = "I"
            pos = end + 1
        sid = f"{id_prefix}{i}"
        sentences.append(TaggedSentence(sid, [f"t{j}" for j in range(length)], tags))
        onehot = np.eye(len(NER_TAGS))[[NER_TAGS.index(t) for t in tags]]
        values = np.stack(
            [onehot + rng.normal(scale=noise, size=onehot.shape) for _ in range(num_layers)]
        )
        records.append(EmbeddingRecord(sid, values.astype(np.float32)))
    return sentences, EmbeddingStore(records)


def make_nli_corpus(n, seed, noise=0.05, num_layers=2, dim=8, id_prefix="p", three_way=True):
    """Pairs where the label is decided by which one-hot dimension both sides share.

    Dims 0-1 shared => entailment, dims 2-3 shared => contradiction, a signal dim
    on one side only => neutral. Filler dims (4-5 premise, 6-7 hypothesis) never
    collide, so the rule is exact. With three_way=False only entailment/neutral
    occur: entailment iff the two sentences share a one-hot dimension.
    """
    rng = np.random.default_rng(seed)
    labels = ["entailment", "contradiction", "neutral"] if three_way else [
        "entailment", "neutral"
    ]
    pairs, records = [], []
    for i in range(n):
        label = labels[i % len(labels)]
        l1, l2 = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        p_dims = list(rng.integers(4, 6, size=l1))
        h_dims = list(rng.integers(6, 8, size=l2))
        if label == "entailment":
            d = int(rng.integers(0, 2))
            p_dims[rng.integers(0, l1)] = d
            h_dims[rng.integers(0, l2)] = d
        elif label == "contradiction":
            d = int(rng.integers(2, 4))
            p_dims[rng.integers(0, l1)] = d
            h_dims[rng.integers(0, l2)] = d
        else:
            d = int(rng.integers(0, 2 if not three_way else 4))
            if rng.random() < 0.5:
                p_dims[rng.integers(0, l1)] = d
            else:
                h_dims[rng.integers(0, l2)] = d
        pid = f"{id_prefix}{i}"
        pairs.append(
            NliPair(pid, [f"w{d}" for d in p_dims], [f"w{d}" for d in h_dims], label)
        )
        for side, dims in (("p", p_dims), ("h", h_dims)):
            onehot = np.eye(dim)[np.array(dims)]
            values = np.stack(
                [onehot + rng.normal(scale=noise, size=onehot.shape) for _ in range(num_layers)]
            )
            records.append(EmbeddingRecord(f"{pid}/{side}", values.astype(np.float32)))
    return pairs, EmbeddingStore(records)


def random_crf_instance(rng, max_len=5, max_tags=4, scale=1.0):
    """A random small CRF problem suitable for brute-force enumeration."""
    from probekit.crf import CrfParams

    num_tags = int(rng.integers(1, max_tags + 1))
    length = int(rng.integers(1, max_len + 1))
    params = CrfParams(
        rng.normal(scale=scale, size=(num_tags, num_tags)),
        rng.normal(scale=scale, size=num_tags),
        rng.normal(scale=scale, size=num_tags),
    )
    emissions = rng.normal(scale=scale, size=(length, num_tags))
    return params, emissions


@pytest.fixture(scope="session")
def small_ner_data():
    train, train_store = make_ner_corpus(60, seed=1000)
    dev, dev_store = make_ner_corpus(20, seed=1001)
    return train, train_store, dev, dev_store
