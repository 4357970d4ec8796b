"""Synthetic dataset + retrieval corpus where external texts resolve entity types.

Each sentence mentions exactly one entity and carries a unique reference
token (u00042-style). Ambiguous surface forms can realize two entity types
and their sentence templates are drawn independently of the realized type,
so no context-only model can tell the types apart. The retrieval corpus
holds three documents per sentence, each containing the sentence's unique
reference token, the entity form, and a type cue token — so BM25 retrieval
against the sentence pulls exactly those documents, and a model that reads
them can recover the type. Unambiguous forms get a type cue word directly
in the sentence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bm25 import Document
from .data import Sentence, serialize_conll

TYPES = ("PER", "LOC")
DOC_CUES = {"PER": "personcue", "LOC": "placecue"}
SENTENCE_CUES = {
    "PER": ("mr", "coach", "singer"),
    "LOC": ("near", "visited", "downtown"),
}
FILLERS = ("report", "story", "update", "note", "thread", "post")
DOCS_PER_SENTENCE = 3


@dataclass(frozen=True)
class SyntheticData:
    train: list[Sentence]
    test: list[Sentence]
    corpus: list[Document]
    manifest: dict


def _form_pools() -> tuple[list[tuple[str, ...]], list[tuple[tuple[str, ...], str]]]:
    ambiguous = []
    for i in range(10):
        base = f"amb{i}"
        ambiguous.append((base,) if i % 2 == 0 else (base, base + "b"))
    unambiguous = []
    for i in range(10):
        base = f"ent{i}"
        surface = (base,) if i % 2 == 0 else (base, base + "b")
        unambiguous.append((surface, TYPES[i % 2]))
    return ambiguous, unambiguous


def generate(n_train: int, n_test: int, ambiguity_rate: float, seed: int) -> SyntheticData:
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    if not 0.0 < ambiguity_rate <= 1.0:
        raise ValueError(f"ambiguity_rate must be in (0, 1], got {ambiguity_rate}")
    rng = np.random.default_rng(seed)
    amb_pool, unamb_pool = _form_pools()

    splits: dict[str, list[Sentence]] = {"train": [], "test": []}
    corpus: list[Document] = []
    manifest_sentences: dict[str, list[dict]] = {"train": [], "test": []}
    counts = {"train": n_train, "test": n_test}
    uid_counter = 0
    for split in ("train", "test"):
        for idx in range(counts[split]):
            uid = f"u{uid_counter:05d}"
            uid_counter += 1
            ambiguous = bool(rng.random() < ambiguity_rate)
            if ambiguous:
                form = amb_pool[int(rng.integers(len(amb_pool)))]
                etype = TYPES[int(rng.integers(2))]
                mid = FILLERS[int(rng.integers(len(FILLERS)))]
            else:
                form, etype = unamb_pool[int(rng.integers(len(unamb_pool)))]
                mid = SENTENCE_CUES[etype][int(rng.integers(len(SENTENCE_CUES[etype])))]
            tail = FILLERS[int(rng.integers(len(FILLERS)))]
            tokens = (uid, mid, *form, tail)
            labels = (
                "O",
                "O",
                f"B-{etype}",
                *(f"I-{etype}",) * (len(form) - 1),
                "O",
            )
            sid = f"s{idx}"
            splits[split].append(Sentence(id=sid, tokens=tokens, labels=labels))
            manifest_sentences[split].append(
                {
                    "id": sid,
                    "uid": uid,
                    "form": list(form),
                    "type": etype,
                    "ambiguous": ambiguous,
                    "span": [2, 2 + len(form)],
                }
            )
            for j in range(DOCS_PER_SENTENCE):
                text = " ".join((uid, *form, DOC_CUES[etype], f"fill{j}"))
                corpus.append(
                    Document(
                        doc_id=f"doc-{uid}-{j}",
                        tokens=tuple(text.split()),
                        raw_text=text,
                    )
                )

    manifest = {
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "ambiguity_rate": ambiguity_rate,
        "types": list(TYPES),
        "doc_cues": DOC_CUES,
        "forms": {
            **{" ".join(f): {"types": list(TYPES), "ambiguous": True} for f in amb_pool},
            **{
                " ".join(f): {"types": [t], "ambiguous": False}
                for f, t in unamb_pool
            },
        },
        "sentences": manifest_sentences,
    }
    return SyntheticData(
        train=splits["train"], test=splits["test"], corpus=corpus, manifest=manifest
    )


def gen_synthetic(
    n_train: int,
    n_test: int,
    ambiguity_rate: float,
    seed: int,
    out_dir: str | Path,
) -> dict[str, Path]:
    """Generate and write train.conll, test.conll, corpus.jsonl, manifest.json."""
    data = generate(n_train, n_test, ambiguity_rate, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out / "train.conll",
        "test": out / "test.conll",
        "corpus": out / "corpus.jsonl",
        "manifest": out / "manifest.json",
    }
    paths["train"].write_text(serialize_conll(data.train), encoding="utf-8")
    paths["test"].write_text(serialize_conll(data.test), encoding="utf-8")
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for doc in data.corpus:
            fh.write(json.dumps({"id": doc.doc_id, "text": doc.raw_text}) + "\n")
    paths["manifest"].write_text(
        json.dumps(data.manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return paths
