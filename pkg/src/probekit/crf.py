"""Linear-chain CRF: scoring, log-partition, marginals, Viterbi, analytic gradients.

A tag sequence t_1..t_L is scored as

    start[t_1] + sum_i emissions[i, t_i] + sum_i transitions[t_i, t_{i+1}] + end[t_L]

and the model is the globally normalized distribution p(t) = exp(score) / Z.
All recursions run in log-space with per-step max shifts; nothing is ever
computed in probability space. Operations are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

NEG_INF = -np.inf


@dataclass
class CrfParams:
    """transitions[u, v] scores tag u followed by tag v; start/end score boundary tags."""

    transitions: np.ndarray  # (T, T)
    start: np.ndarray  # (T,)
    end: np.ndarray  # (T,)

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        t = self.start.shape[0]
        if self.transitions.shape != (t, t) or self.end.shape != (t,) or t < 1:
            raise ValidationError(
                f"inconsistent CRF shapes: transitions {self.transitions.shape}, "
                f"start {self.start.shape}, end {self.end.shape}"
            )
        for name, arr in (("transitions", self.transitions), ("start", self.start),
                          ("end", self.end)):
            if not np.isfinite(arr).all():
                raise ValidationError(f"CRF {name} contains non-finite values")

    @classmethod
    def zeros(cls, num_tags: int) -> "CrfParams":
        return cls(np.zeros((num_tags, num_tags)), np.zeros(num_tags), np.zeros(num_tags))

    @property
    def num_tags(self) -> int:
        return self.start.shape[0]

    def copy(self) -> "CrfParams":
        return CrfParams(self.transitions.copy(), self.start.copy(), self.end.copy())


@dataclass
class CrfGrads:
    emissions: np.ndarray  # (L, T)
    transitions: np.ndarray  # (T, T)
    start: np.ndarray  # (T,)
    end: np.ndarray  # (T,)


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    """Max-shifted log-sum-exp; tolerates -inf entries (empty mass stays -inf)."""
    a = np.asarray(a, dtype=np.float64)
    a_max = np.max(a, axis=axis, keepdims=True)
    a_max_safe = np.where(np.isfinite(a_max), a_max, 0.0)
    out = np.log(np.sum(np.exp(a - a_max_safe), axis=axis)) + np.squeeze(a_max_safe, axis=axis)
    return out


def _check_emissions(params: CrfParams, emissions: np.ndarray) -> np.ndarray:
    emissions = np.asarray(emissions, dtype=np.float64)
    if emissions.ndim != 2 or emissions.shape[0] < 1 or emissions.shape[1] != params.num_tags:
        raise ValidationError(
            f"emissions must be (L, {params.num_tags}) with L >= 1, got {emissions.shape}"
        )
    return emissions


def _check_tags(tags, length: int, num_tags: int) -> list[int]:
    tags = [int(t) for t in tags]
    if len(tags) != length:
        raise ValidationError(f"tag sequence length {len(tags)} != emission rows {length}")
    if any(t < 0 or t >= num_tags for t in tags):
        raise ValidationError(f"tag index out of range 0..{num_tags - 1}: {tags}")
    return tags


def score_sequence(params: CrfParams, emissions: np.ndarray, tags) -> float:
    """Unnormalized log-score of one tag sequence."""
    emissions = _check_emissions(params, emissions)
    tags = _check_tags(tags, emissions.shape[0], params.num_tags)
    score = params.start[tags[0]] + params.end[tags[-1]]
    score += sum(emissions[i, t] for i, t in enumerate(tags))
    score += sum(params.transitions[tags[i], tags[i + 1]] for i in range(len(tags) - 1))
    return float(score)


def log_partition(params: CrfParams, emissions: np.ndarray) -> float:
    """log sum over all T^L sequences of exp(score), by the forward recursion."""
    emissions = _check_emissions(params, emissions)
    alpha = params.start + emissions[0]
    for i in range(1, emissions.shape[0]):
        alpha = _logsumexp(alpha[:, None] + params.transitions, axis=0) + emissions[i]
    return float(_logsumexp(alpha + params.end))


def _forward_backward(params: CrfParams, emissions: np.ndarray):
    """Forward/backward messages in log-space; returns (alpha, beta, logZ)."""
    length = emissions.shape[0]
    alpha = np.empty_like(emissions)
    alpha[0] = params.start + emissions[0]
    for i in range(1, length):
        alpha[i] = _logsumexp(alpha[i - 1][:, None] + params.transitions, axis=0) + emissions[i]
    beta = np.empty_like(emissions)
    beta[-1] = params.end
    for i in range(length - 2, -1, -1):
        beta[i] = _logsumexp(params.transitions + (emissions[i + 1] + beta[i + 1])[None, :], axis=1)
    log_z = float(_logsumexp(alpha[-1] + params.end))
    return alpha, beta, log_z


def marginals(params: CrfParams, emissions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unary p(t_i = v) as (L, T) and pairwise p(t_i = u, t_{i+1} = v) as (L-1, T, T)."""
    emissions = _check_emissions(params, emissions)
    alpha, beta, log_z = _forward_backward(params, emissions)
    unary = np.exp(alpha + beta - log_z)
    length = emissions.shape[0]
    pairwise = np.empty((length - 1, params.num_tags, params.num_tags))
    for i in range(length - 1):
        pairwise[i] = np.exp(
            alpha[i][:, None]
            + params.transitions
            + (emissions[i + 1] + beta[i + 1])[None, :]
            - log_z
        )
    return unary, pairwise


def viterbi(
    params: CrfParams,
    emissions: np.ndarray,
    allowed_start: np.ndarray | None = None,
    allowed_transitions: np.ndarray | None = None,
) -> tuple[list[int], float]:
    """Best-scoring tag sequence and its score; ties broken toward the lowest tag index.

    Optional boolean masks forbid structurally invalid start tags / transitions at
    decode time only (scores become -inf); at least one allowed path must exist.
    """
    emissions = _check_emissions(params, emissions)
    num_tags = params.num_tags
    trans = params.transitions.copy()
    if allowed_transitions is not None:
        trans = np.where(np.asarray(allowed_transitions, dtype=bool), trans, NEG_INF)
    delta = params.start + emissions[0]
    if allowed_start is not None:
        delta = np.where(np.asarray(allowed_start, dtype=bool), delta, NEG_INF)

    backptr = np.empty((emissions.shape[0] - 1, num_tags), dtype=np.intp)
    for i in range(1, emissions.shape[0]):
        scores = delta[:, None] + trans  # (from, to)
        backptr[i - 1] = np.argmax(scores, axis=0)  # first max = lowest index
        delta = scores[backptr[i - 1], np.arange(num_tags)] + emissions[i]

    final = delta + params.end
    best_last = int(np.argmax(final))
    best_score = float(final[best_last])
    if not np.isfinite(best_score):
        raise ValidationError("no structurally valid tag sequence under the given constraints")

    tags = [best_last]
    for i in range(emissions.shape[0] - 2, -1, -1):
        tags.append(int(backptr[i][tags[-1]]))
    tags.reverse()
    return tags, best_score


def nll_and_grad(
    params: CrfParams, emissions: np.ndarray, gold
) -> tuple[float, CrfGrads]:
    """Negative log-likelihood of the gold sequence and its analytic gradients.

    loss = logZ - score(gold); the gradient w.r.t. each score table is the
    corresponding marginal minus the gold indicator.
    """
    emissions = _check_emissions(params, emissions)
    gold = _check_tags(gold, emissions.shape[0], params.num_tags)
    alpha, beta, log_z = _forward_backward(params, emissions)
    loss = log_z - score_sequence(params, emissions, gold)

    unary = np.exp(alpha + beta - log_z)
    d_emissions = unary.copy()
    for i, t in enumerate(gold):
        d_emissions[i, t] -= 1.0

    d_transitions = np.zeros_like(params.transitions)
    length = emissions.shape[0]
    for i in range(length - 1):
        d_transitions += np.exp(
            alpha[i][:, None]
            + params.transitions
            + (emissions[i + 1] + beta[i + 1])[None, :]
            - log_z
        )
        d_transitions[gold[i], gold[i + 1]] -= 1.0

    d_start = unary[0].copy()
    d_start[gold[0]] -= 1.0
    d_end = unary[-1].copy()
    d_end[gold[-1]] -= 1.0
    return float(loss), CrfGrads(d_emissions, d_transitions, d_start, d_end)
