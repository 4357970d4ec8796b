"""Graph-based keyword scoring over token co-occurrence graphs.

The score recurrence is the weighted PageRank variant
    WS(v) = (1 - d) + d * sum_{u in In(v)} w_uv / outsum(u) * WS(u)
iterated from all-ones until the max per-node change drops below `tol`.

Per-node accumulation uses math.fsum, so converged scores are exactly
invariant under node relabeling and under integer rescaling of all edge
weights (the recurrence normalizes each node's outgoing weight mass).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence


@dataclass(frozen=True)
class TextRankConfig:
    window: int = 5
    damping: float = 0.85
    tol: float = 1e-6
    max_iter: int = 100
    stopwords: frozenset[str] = frozenset()


@dataclass(frozen=True)
class CooccurrenceGraph:
    """Symmetric weighted co-occurrence graph; weights are positive counts."""

    adjacency: dict[str, dict[str, int]]

    @property
    def nodes(self) -> list[str]:
        return sorted(self.adjacency)

    def __len__(self) -> int:
        return len(self.adjacency)


@dataclass(frozen=True)
class TextRankResult:
    """Converged (or last-iterate) scores plus a convergence report."""

    scores: dict[str, float]
    converged: bool
    iterations: int


def build_graph(
    tokens: Sequence[str], window: int = 5, stopwords: Iterable[str] = ()
) -> CooccurrenceGraph:
    """Count co-occurrences of distinct non-stopword tokens within `window`.

    Two candidate positions i < j co-occur when j - i < window; each such
    position pair adds 1 to the (undirected) edge weight. Self-loops are
    never created. All tokens filtered out yields an empty graph.
    """
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    stop = set(stopwords)
    adjacency: dict[str, dict[str, int]] = {
        tok: {} for tok in tokens if tok not in stop
    }
    n = len(tokens)
    for i in range(n):
        a = tokens[i]
        if a in stop:
            continue
        for j in range(i + 1, min(i + window, n)):
            b = tokens[j]
            if b in stop or b == a:
                continue
            adjacency[a][b] = adjacency[a].get(b, 0) + 1
            adjacency[b][a] = adjacency[b].get(a, 0) + 1
    return CooccurrenceGraph(adjacency)


def textrank_scores(
    graph: CooccurrenceGraph,
    damping: float = 0.85,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> TextRankResult:
    """Iterate the weighted score recurrence to a fixed point.

    All nodes start at 1.0; isolated nodes settle at (1 - damping)
    immediately. Non-convergence within `max_iter` returns the last iterate
    with converged=False.
    """
    if not graph.adjacency:
        raise ValueError("textrank_scores requires a non-empty graph")
    if not 0.0 < damping < 1.0:
        raise ValueError(f"damping must be in (0, 1), got {damping}")
    adjacency = graph.adjacency
    outsum = {u: sum(nbrs.values()) for u, nbrs in adjacency.items()}
    # w_uv / outsum(u) per directed edge; exact-rounded, so uniformly scaled
    # integer weights produce bit-identical ratios.
    ratio = {
        u: {v: w / outsum[u] for v, w in nbrs.items()}
        for u, nbrs in adjacency.items()
    }
    scores = {u: 1.0 for u in adjacency}
    base = 1.0 - damping
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new = {
            v: base
            + damping
            * math.fsum(ratio[u][v] * scores[u] for u in adjacency[v])
            for v in adjacency
        }
        delta = max(abs(new[v] - scores[v]) for v in adjacency)
        scores = new
        if delta < tol:
            converged = True
            break
    return TextRankResult(scores=scores, converged=converged, iterations=iterations)


def top_m_keywords(scores: Mapping[str, float], m: int) -> list[str]:
    """The min(m, n) highest-scoring tokens, score descending, ties by token."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [tok for tok, _ in ranked[:m]]
