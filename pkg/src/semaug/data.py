"""Domain types for token-level sequence labeling.

Sentences carry opaque string tokens with optional BIO labels; entities are
token-index spans; evaluation is exact-match micro precision/recall/F1.
Everything here is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

_LABEL_RE = re.compile(r"^(O|[BI]-\S+)$")


class ParseError(ValueError):
    """Malformed dataset text (bad line structure, mixed labeling)."""


class ValidationError(ValueError):
    """Token or BIO-label sequence violates an invariant."""


def _check_token(text: str) -> None:
    if not text:
        raise ValidationError("token must be non-empty")
    if any(ch.isspace() for ch in text):
        raise ValidationError(f"token {text!r} contains whitespace")


def validate_bio(labels: Sequence[str], *, where: str = "") -> None:
    """Raise ValidationError unless `labels` is a valid BIO sequence.

    An I-<type> tag may only follow B-<type> or I-<type> of the same type.
    """
    prefix = f"{where}: " if where else ""
    prev = "O"
    for pos, label in enumerate(labels):
        if not _LABEL_RE.match(label):
            raise ValidationError(f"{prefix}bad label {label!r} at position {pos}")
        if label.startswith("I-"):
            etype = label[2:]
            if prev != f"B-{etype}" and prev != f"I-{etype}":
                raise ValidationError(
                    f"{prefix}I-{etype} at position {pos} follows {prev!r}"
                )
        prev = label


@dataclass(frozen=True)
class Sentence:
    """A token sequence, optionally with one BIO label per token."""

    id: str
    tokens: tuple[str, ...]
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValidationError(f"sentence {self.id}: no tokens")
        for tok in self.tokens:
            _check_token(tok)
        if self.labels is not None:
            if len(self.labels) != len(self.tokens):
                raise ValidationError(
                    f"sentence {self.id}: {len(self.labels)} labels for "
                    f"{len(self.tokens)} tokens"
                )
            validate_bio(self.labels, where=f"sentence {self.id}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Half-open token span [start, end) of one entity type."""

    start: int
    end: int
    etype: str

    def __post_init__(self) -> None:
        if not (0 <= self.start < self.end):
            raise ValidationError(f"bad span ({self.start}, {self.end})")


@dataclass(frozen=True)
class EvalReport:
    """Micro-averaged exact-match counts and derived P/R/F1."""

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
        denom = precision + recall
        f1 = 2.0 * precision * recall / denom if denom > 0 else 0.0
        return cls(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall, f1=f1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "tp": self.tp,
                "fp": self.fp,
                "fn": self.fn,
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
            }
        )


def parse_conll(text: str) -> list[Sentence]:
    """Parse `token<TAB>label` lines into sentences.

    Sentences are separated by blank lines; a file may be entirely unlabeled
    (bare tokens), but labeled and unlabeled lines must not mix within one
    sentence. Sentence ids are assigned sequentially: s0, s1, ...
    """
    sentences: list[Sentence] = []
    tokens: list[str] = []
    labels: list[str] = []
    labeled: bool | None = None
    start_line = 0

    def flush() -> None:
        nonlocal labeled
        if not tokens:
            return
        sid = f"s{len(sentences)}"
        try:
            sentences.append(
                Sentence(
                    id=sid,
                    tokens=tuple(tokens),
                    labels=tuple(labels) if labeled else None,
                )
            )
        except ValidationError:
            raise
        tokens.clear()
        labels.clear()
        labeled = None

    for lineno, line in enumerate(text.split("\n"), start=1):
        if line.strip() == "":
            flush()
            continue
        parts = line.split("\t")
        if len(parts) > 2:
            raise ParseError(f"line {lineno}: expected at most one tab: {line!r}")
        has_label = len(parts) == 2
        if labeled is None:
            labeled = has_label
            start_line = lineno
        elif labeled != has_label:
            raise ParseError(
                f"line {lineno}: mixed labeled/unlabeled lines in the sentence "
                f"starting at line {start_line}"
            )
        tokens.append(parts[0])
        if has_label:
            labels.append(parts[1])
    flush()
    return sentences


def serialize_conll(sentences: Iterable[Sentence]) -> str:
    """Inverse of parse_conll; ends with a single trailing newline."""
    blocks = []
    for sent in sentences:
        if sent.labels is not None:
            lines = [f"{t}\t{l}" for t, l in zip(sent.tokens, sent.labels)]
        else:
            lines = list(sent.tokens)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n" if blocks else ""


def extract_spans(labels: Sequence[str]) -> list[EntitySpan]:
    """Turn a valid BIO sequence into entity spans, sorted by start.

    Each maximal B-I run of one type becomes one span; O produces nothing.
    """
    validate_bio(labels)
    spans: list[EntitySpan] = []
    start = -1
    etype = ""
    for pos, label in enumerate(labels):
        if label.startswith("B-"):
            if start >= 0:
                spans.append(EntitySpan(start, pos, etype))
            start, etype = pos, label[2:]
        elif label == "O":
            if start >= 0:
                spans.append(EntitySpan(start, pos, etype))
            start = -1
    if start >= 0:
        spans.append(EntitySpan(start, len(labels), etype))
    return spans


def spans_to_labels(spans: Iterable[EntitySpan], length: int) -> tuple[str, ...]:
    """Render non-overlapping spans back into a BIO sequence of `length`."""
    labels = ["O"] * length
    for span in sorted(spans):
        if span.end > length:
            raise ValidationError(f"span {span} exceeds length {length}")
        if any(l != "O" for l in labels[span.start : span.end]):
            raise ValidationError(f"span {span} overlaps another span")
        labels[span.start] = f"B-{span.etype}"
        for pos in range(span.start + 1, span.end):
            labels[pos] = f"I-{span.etype}"
    return tuple(labels)


def repair_bio(labels: Sequence[str]) -> tuple[str, ...]:
    """Rewrite orphan I-<type> tags to B-<type> so the sequence is valid BIO.

    Decoders may emit I- tags at the sentence start, after O, or after a
    different entity type; those openings become B- tags.
    """
    repaired: list[str] = []
    prev = "O"
    for label in labels:
        if label.startswith("I-"):
            etype = label[2:]
            if prev != f"B-{etype}" and prev != f"I-{etype}":
                label = f"B-{etype}"
        repaired.append(label)
        prev = label
    return tuple(repaired)


def exact_match_prf(
    gold: Sequence[Iterable[EntitySpan]], pred: Sequence[Iterable[EntitySpan]]
) -> EvalReport:
    """Micro exact-match P/R/F1 over per-sentence span collections.

    A predicted span counts as a true positive only when both boundaries and
    the entity type match a gold span of the same sentence.
    """
    if len(gold) != len(pred):
        raise ValueError(f"gold has {len(gold)} sentences, pred has {len(pred)}")
    tp = fp = fn = 0
    for gold_i, pred_i in zip(gold, pred):
        gset, pset = set(gold_i), set(pred_i)
        tp += len(gset & pset)
        fp += len(pset - gset)
        fn += len(gset - pset)
    return EvalReport.from_counts(tp, fp, fn)
