"""Okapi BM25 inverted index.

Scoring uses the non-negative IDF variant
    IDF(t) = ln((N - n_t + 0.5) / (n_t + 0.5) + 1)
so scores never go negative for very common terms. The index does no text
normalization: callers tokenize, the index matches tokens exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


@dataclass(frozen=True)
class Document:
    doc_id: str
    tokens: tuple[str, ...]
    raw_text: str

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError(f"document {self.doc_id!r} has no tokens")


def tokenize_text(text: str) -> tuple[str, ...]:
    """Whitespace-split when the text contains any whitespace, else per-character."""
    if any(ch.isspace() for ch in text):
        return tuple(text.split())
    return tuple(text)


def load_corpus(path: str | Path) -> list[Document]:
    """Read a JSON Lines corpus of {"id": ..., "text": ...} objects."""
    docs: list[Document] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc_id, text = obj["id"], obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record: {exc}") from exc
            tokens = tokenize_text(text)
            if not tokens:
                raise ValueError(f"{path}:{lineno}: document {doc_id!r} is empty")
            docs.append(Document(doc_id=str(doc_id), tokens=tokens, raw_text=text))
    return docs


class Bm25Index:
    """Immutable postings + document statistics; build once, query freely."""

    def __init__(
        self,
        postings: dict[str, dict[str, int]],
        doc_lengths: dict[str, int],
        k1: float,
        b: float,
    ):
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.k1 = k1
        self.b = b
        self.n_docs = len(doc_lengths)
        self.avgdl = (
            sum(doc_lengths.values()) / self.n_docs if self.n_docs else 0.0
        )

    @classmethod
    def build(
        cls, docs: Sequence[Document], k1: float = 1.5, b: float = 0.75
    ) -> "Bm25Index":
        if k1 < 0:
            raise ValueError(f"k1 must be >= 0, got {k1}")
        if not 0.0 <= b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {b}")
        postings: dict[str, dict[str, int]] = {}
        doc_lengths: dict[str, int] = {}
        for doc in docs:
            if doc.doc_id in doc_lengths:
                raise ValueError(f"duplicate doc_id {doc.doc_id!r}")
            doc_lengths[doc.doc_id] = len(doc.tokens)
            for tok in doc.tokens:
                postings.setdefault(tok, {})
                postings[tok][doc.doc_id] = postings[tok].get(doc.doc_id, 0) + 1
        return cls(postings, doc_lengths, k1, b)

    def idf(self, term: str) -> float:
        n_t = len(self.postings.get(term, ()))
        return math.log((self.n_docs - n_t + 0.5) / (n_t + 0.5) + 1.0)

    def score(self, query: Sequence[str], doc_id: str) -> float:
        """BM25 score of one document against a token query.

        A term repeated in the query contributes once per occurrence.
        """
        if doc_id not in self.doc_lengths:
            raise KeyError(f"unknown doc_id {doc_id!r}")
        dl = self.doc_lengths[doc_id]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        total = 0.0
        for term in query:
            f = self.postings.get(term, {}).get(doc_id, 0)
            if f == 0:
                continue
            total += self.idf(term) * f * (self.k1 + 1.0) / (f + norm)
        return total

    def rank(self, query: Sequence[str], k: int) -> list[tuple[str, float]]:
        """Top min(k, n_docs) documents by descending score.

        Ties break by ascending doc_id; zero-score documents appear only
        when needed to fill k.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        matched: set[str] = set()
        for term in query:
            matched.update(self.postings.get(term, ()))
        scored = sorted(
            ((doc_id, self.score(query, doc_id)) for doc_id in matched),
            key=lambda pair: (-pair[1], pair[0]),
        )
        scored = [pair for pair in scored if pair[1] > 0.0]
        if len(scored) < k:
            rest = sorted(self.doc_lengths.keys() - {d for d, _ in scored})
            scored.extend((doc_id, 0.0) for doc_id in rest[: k - len(scored)])
        return scored[:k]

    def to_json(self) -> str:
        payload = {
            "k1": self.k1,
            "b": self.b,
            "avgdl": self.avgdl,
            "n_docs": self.n_docs,
            "doc_lengths": dict(sorted(self.doc_lengths.items())),
            "postings": {
                term: sorted(by_doc.items())
                for term, by_doc in sorted(self.postings.items())
            },
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Bm25Index":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        postings = {
            term: {doc_id: int(tf) for doc_id, tf in entries}
            for term, entries in obj["postings"].items()
        }
        return cls(postings, {d: int(n) for d, n in obj["doc_lengths"].items()},
                   float(obj["k1"]), float(obj["b"]))


def build_index(
    docs: Sequence[Document], k1: float = 1.5, b: float = 0.75
) -> Bm25Index:
    """Functional alias for Bm25Index.build."""
    return Bm25Index.build(docs, k1=k1, b=b)
