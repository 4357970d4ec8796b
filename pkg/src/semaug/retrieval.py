"""Query generation, candidate retrieval, and top-K re-ranking.

The pipeline is: extract query keywords from the sentence, fetch candidate
documents from a search backend, then re-rank the candidates by BM25
similarity to the full sentence and keep the top K. Retrieval is decoupled
from training through a JSONL contexts cache keyed by sentence id.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .bm25 import Bm25Index, Document, tokenize_text
from . import textrank
from .data import Sentence
from .textrank import TextRankConfig

logger = logging.getLogger(__name__)


class RetrievalError(RuntimeError):
    """A search backend failed; carries the backend's diagnostics."""


class SearchBackend(Protocol):
    def search(self, keywords: Sequence[str], n: int) -> list[Document]:
        """Return at most n documents for the keyword query."""
        ...


class LocalCorpusBackend:
    """Deterministic stand-in for a web search engine.

    Ranks a fixed local corpus by BM25 with the keyword list as the query.
    """

    def __init__(self, docs: Sequence[Document], k1: float = 1.5, b: float = 0.75):
        self._docs = {doc.doc_id: doc for doc in docs}
        self._index = Bm25Index.build(docs, k1=k1, b=b)

    def search(self, keywords: Sequence[str], n: int) -> list[Document]:
        if self._index.n_docs == 0:
            return []
        ranked = self._index.rank(keywords, n)
        return [self._docs[doc_id] for doc_id, _ in ranked]


class FileBackend:
    """Replays recorded keyword -> documents responses from a JSONL file.

    Records are {"keywords": [...], "results": [{"id":..., "text":...}]} and
    match on exact keyword-list equality; later records override earlier
    ones. Unrecorded queries return no results.
    """

    def __init__(self, path: str | Path):
        self._responses: dict[tuple[str, ...], list[Document]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    key = tuple(obj["keywords"])
                    results = [
                        Document(
                            doc_id=str(r["id"]),
                            tokens=tokenize_text(r["text"]),
                            raw_text=r["text"],
                        )
                        for r in obj["results"]
                    ]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad record: {exc}") from exc
                self._responses[key] = results

    def search(self, keywords: Sequence[str], n: int) -> list[Document]:
        return self._responses.get(tuple(keywords), [])[:n]


@dataclass(frozen=True)
class ContextDoc:
    doc_id: str
    score: float
    text: str


@dataclass(frozen=True)
class ExternalContexts:
    """Top-K related texts attached to one sentence; may be empty."""

    sentence_id: str
    contexts: tuple[ContextDoc, ...]

    def __post_init__(self) -> None:
        scores = [c.score for c in self.contexts]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"{self.sentence_id}: context scores must be non-increasing")


@dataclass(frozen=True)
class RetrievalConfig:
    m: int = 5
    n_candidates: int = 20
    k: int = 3
    k1: float = 1.5
    b: float = 0.75
    textrank: TextRankConfig = field(default_factory=TextRankConfig)


def generate_query(
    sentence: Sentence, m: int = 5, config: TextRankConfig = TextRankConfig()
) -> list[str]:
    """Extract up to m query keywords from the sentence.

    Falls back to the first min(m, len) tokens when every token is filtered
    out, so a non-empty sentence always yields a non-empty query.
    """
    graph = textrank.build_graph(
        sentence.tokens, window=config.window, stopwords=config.stopwords
    )
    if len(graph) == 0:
        return list(sentence.tokens[:m])
    result = textrank.textrank_scores(
        graph, damping=config.damping, tol=config.tol, max_iter=config.max_iter
    )
    return textrank.top_m_keywords(result.scores, m)


def retrieve_candidates(
    backend: SearchBackend, keywords: Sequence[str], n_candidates: int = 20
) -> list[Document]:
    """Fetch candidates, de-duplicated by doc_id preserving first occurrence."""
    if not keywords:
        raise ValueError("retrieve_candidates requires a non-empty keyword list")
    try:
        results = backend.search(keywords, n_candidates)
    except Exception as exc:
        raise RetrievalError(f"backend failed for keywords {list(keywords)!r}: {exc}") from exc
    seen: set[str] = set()
    unique: list[Document] = []
    for doc in results:
        if doc.doc_id not in seen:
            seen.add(doc.doc_id)
            unique.append(doc)
    return unique[:n_candidates]


def rerank_topk(
    candidates: Sequence[Document],
    sentence: Sentence,
    k: int,
    k1: float = 1.5,
    b: float = 0.75,
) -> ExternalContexts:
    """Keep the top-k candidates by BM25 similarity to the full sentence.

    The temporary index covers the candidate set only; k=0 always returns
    empty contexts.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0 or not candidates:
        return ExternalContexts(sentence_id=sentence.id, contexts=())
    index = Bm25Index.build(candidates, k1=k1, b=b)
    by_id = {doc.doc_id: doc for doc in candidates}
    ranked = index.rank(sentence.tokens, k)
    contexts = tuple(
        ContextDoc(doc_id=doc_id, score=score, text=by_id[doc_id].raw_text)
        for doc_id, score in ranked
    )
    return ExternalContexts(sentence_id=sentence.id, contexts=contexts)


def retrieve_for_sentence(
    sentence: Sentence, backend: SearchBackend, config: RetrievalConfig
) -> ExternalContexts:
    """Run the full keyword -> candidates -> re-rank pipeline for one sentence."""
    keywords = generate_query(sentence, m=config.m, config=config.textrank)
    candidates = retrieve_candidates(backend, keywords, config.n_candidates)
    return rerank_topk(candidates, sentence, config.k, k1=config.k1, b=config.b)


def contexts_to_json(record: ExternalContexts) -> str:
    return json.dumps(
        {
            "sentence_id": record.sentence_id,
            "contexts": [
                {"doc_id": c.doc_id, "score": c.score, "text": c.text}
                for c in record.contexts
            ],
        },
        ensure_ascii=False,
    )


def build_contexts_cache(
    sentences: Sequence[Sentence],
    backend: SearchBackend,
    config: RetrievalConfig,
    out_path: str | Path,
) -> list[ExternalContexts]:
    """Write one JSONL cache record per sentence, in dataset order.

    A backend failure degrades to empty contexts with a logged warning, so a
    flaky backend cannot poison an otherwise reproducible cache build.
    """
    records: list[ExternalContexts] = []
    for sentence in sentences:
        try:
            record = retrieve_for_sentence(sentence, backend, config)
        except RetrievalError as exc:
            logger.warning("retrieval failed for %s: %s", sentence.id, exc)
            record = ExternalContexts(sentence_id=sentence.id, contexts=())
        records.append(record)
    out = Path(out_path)
    try:
        with open(out, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(contexts_to_json(record) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write contexts cache {out}: {exc}") from exc
    return records


def load_contexts_cache(path: str | Path) -> dict[str, ExternalContexts]:
    """Read a contexts cache back into sentence_id -> contexts, in file order."""
    records: dict[str, ExternalContexts] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                record = ExternalContexts(
                    sentence_id=obj["sentence_id"],
                    contexts=tuple(
                        ContextDoc(
                            doc_id=c["doc_id"], score=float(c["score"]), text=c["text"]
                        )
                        for c in obj["contexts"]
                    ),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad cache record: {exc}") from exc
            records[record.sentence_id] = record
    return records
