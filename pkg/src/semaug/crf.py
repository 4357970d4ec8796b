"""Linear-chain CRF head: emission projection, log-space forward algorithm,
forward-backward gradients, and Viterbi decoding.

A label path y over emissions e[0..L-1] scores
    start[y0] + sum_t e[t, y_t] + sum_t trans[y_{t-1}, y_t] + end[y_{L-1}]
and the training loss is logZ - score(gold), computed entirely in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp


@dataclass
class CrfParams:
    """Emission projection plus transition/start/end scores."""

    w_emit: np.ndarray  # [d_model, n_labels]
    b_emit: np.ndarray  # [n_labels]
    trans: np.ndarray   # [n_labels, n_labels]; trans[i, j] scores i -> j
    start: np.ndarray   # [n_labels]
    end: np.ndarray     # [n_labels]

    @property
    def n_labels(self) -> int:
        return self.b_emit.shape[0]


def emissions(h: np.ndarray, params: CrfParams) -> np.ndarray:
    """Project hidden states [L_real, d_model] to label scores [L_real, n_labels]."""
    return h @ params.w_emit + params.b_emit


def _check_emissions(em: np.ndarray) -> None:
    if em.ndim != 2 or em.shape[0] < 1:
        raise ValueError(f"emissions must be [L >= 1, n_labels], got shape {em.shape}")


def forward_logz(em: np.ndarray, params: CrfParams) -> tuple[float, np.ndarray]:
    """Forward algorithm; returns (logZ, alpha[L, n_labels])."""
    _check_emissions(em)
    length = em.shape[0]
    alpha = np.empty_like(em)
    alpha[0] = params.start + em[0]
    for t in range(1, length):
        alpha[t] = em[t] + logsumexp(alpha[t - 1][:, None] + params.trans, axis=0)
    return float(logsumexp(alpha[-1] + params.end)), alpha


def backward_beta(em: np.ndarray, params: CrfParams) -> np.ndarray:
    """Backward recursion; beta[t, i] sums continuations from label i at t."""
    length = em.shape[0]
    beta = np.empty_like(em)
    beta[-1] = params.end
    for t in range(length - 2, -1, -1):
        beta[t] = logsumexp(params.trans + (em[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def path_score(em: np.ndarray, path: Sequence[int], params: CrfParams) -> float:
    _check_emissions(em)
    if len(path) != em.shape[0]:
        raise ValueError(f"path length {len(path)} != {em.shape[0]} emission rows")
    y = np.asarray(path, dtype=np.int64)
    s = params.start[y[0]] + em[np.arange(len(y)), y].sum() + params.end[y[-1]]
    if len(y) > 1:
        s += params.trans[y[:-1], y[1:]].sum()
    return float(s)


def nll(em: np.ndarray, gold: Sequence[int], params: CrfParams) -> float:
    """Negative log-likelihood logZ - score(gold); always >= 0."""
    logz, _ = forward_logz(em, params)
    return logz - path_score(em, gold, params)


def nll_with_grad(
    em: np.ndarray, gold: Sequence[int], params: CrfParams
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """NLL and its gradients w.r.t. (emissions, trans, start, end).

    Gradients are expected feature counts under the model minus observed
    counts on the gold path, via forward-backward marginals.
    """
    logz, alpha = forward_logz(em, params)
    beta = backward_beta(em, params)
    length = em.shape[0]
    y = np.asarray(gold, dtype=np.int64)
    if y.shape[0] != length:
        raise ValueError(f"gold length {y.shape[0]} != {length} emission rows")

    unary = np.exp(alpha + beta - logz)  # [L, n] position marginals
    d_em = unary.copy()
    d_em[np.arange(length), y] -= 1.0

    d_trans = np.zeros_like(params.trans)
    for t in range(length - 1):
        pair = np.exp(
            alpha[t][:, None] + params.trans + (em[t + 1] + beta[t + 1])[None, :] - logz
        )
        d_trans += pair
        d_trans[y[t], y[t + 1]] -= 1.0

    d_start = unary[0].copy()
    d_start[y[0]] -= 1.0
    d_end = unary[-1].copy()
    d_end[y[-1]] -= 1.0

    loss = logz - path_score(em, gold, params)
    return loss, d_em, d_trans, d_start, d_end


def viterbi(em: np.ndarray, params: CrfParams) -> tuple[list[int], float]:
    """Maximum-score label path and its score.

    Ties prefer the lower label index at every backtracking step, so decoding
    is deterministic.
    """
    _check_emissions(em)
    length, n = em.shape
    delta = np.empty_like(em)
    back = np.zeros((length, n), dtype=np.int64)
    delta[0] = params.start + em[0]
    for t in range(1, length):
        cand = delta[t - 1][:, None] + params.trans  # [from, to]
        back[t] = np.argmax(cand, axis=0)
        delta[t] = em[t] + cand[back[t], np.arange(n)]
    final = delta[-1] + params.end
    last = int(np.argmax(final))
    path = [last]
    for t in range(length - 1, 0, -1):
        last = int(back[t, last])
        path.append(last)
    path.reverse()
    return path, float(final[path[-1]])
