"""Training loop and evaluation.

Training is deterministic for a fixed seed and single-threaded execution:
shuffling draws from one seeded generator, sentences are bucketed by length
(shuffle order breaks ties), and batches are padded to the bucket max (to
the full max_len in linear-fusion mode, whose mixing matrix has a fixed
sequence dimension). The optimizer is decoupled-weight-decay Adam with three
learning-rate groups: encoder, fusion, and CRF parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import model
from .bm25 import tokenize_text
from .data import (
    EvalReport,
    Sentence,
    exact_match_prf,
    extract_spans,
    repair_bio,
)
from .encoder import Vocab
from .errors import ConfigError
from .model import ModelConfig, batch_nll_and_grads, batch_predict
from .retrieval import ExternalContexts

LR_GROUPS = ("encoder.", "fusion.", "crf.")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    encoder_lr: float = 1e-3
    fusion_lr: float = 5e-3
    crf_lr: float = 1e-3
    warmup: float = 0.1
    seed: int = 0
    k: int = 3
    p: float = 0.5
    fusion_mode: str = "attention"
    max_len: int = 32
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    early_stop: bool = False
    patience: int = 10

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("encoder_lr", "fusion_lr", "crf_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError(f"warmup must be in [0, 1), got {self.warmup}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must be in [0, 1], got {self.p}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Example:
    """One sentence packed for the model: ids for channel 0 and contexts."""

    sentence_id: str
    token_ids: list[int]
    context_ids: list[list[int]]
    gold: list[int] | None


class AdamW:
    """Adam with decoupled weight decay and per-prefix learning rates."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr_by_group: Mapping[str, float],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.lr_by_group = dict(lr_by_group)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in params.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.items()}

    def _lr(self, name: str) -> float:
        for prefix, lr in self.lr_by_group.items():
            if name.startswith(prefix):
                return lr
        raise ConfigError(f"parameter {name!r} belongs to no learning-rate group")

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        lr_scale: float,
    ) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(params):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self._lr(name) * lr_scale
            params[name] *= 1.0 - lr * self.weight_decay
            params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_schedule(step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear warmup to 1.0 over warmup_frac of steps, then linear decay to 0."""
    warmup_steps = int(warmup_frac * total_steps)
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    return (total_steps - step) / max(1, total_steps - warmup_steps)


def build_vocab(
    sentences: Sequence[Sentence], cache: Mapping[str, ExternalContexts]
) -> Vocab:
    """Vocabulary over dataset tokens plus all cached context texts."""
    sources = [sent.tokens for sent in sentences]
    sources.extend(
        tokenize_text(ctx.text) for record in cache.values() for ctx in record.contexts
    )
    return Vocab.build(sources)


def prepare_examples(
    sentences: Sequence[Sentence],
    cache: Mapping[str, ExternalContexts],
    vocab: Vocab,
    labels: Sequence[str],
    k: int,
    max_len: int,
    require_labels: bool,
) -> list[Example]:
    """Resolve tokens and contexts to ids; fails fast on cache/label mismatches."""
    label_index = {label: i for i, label in enumerate(labels)}
    examples: list[Example] = []
    for sent in sentences:
        record = cache.get(sent.id)
        if record is None:
            raise ConfigError(f"no contexts-cache record for sentence {sent.id!r}")
        if len(record.contexts) > k:
            raise ConfigError(
                f"cache record {sent.id!r} has {len(record.contexts)} contexts, "
                f"but k={k}; rebuild the cache"
            )
        gold = None
        if sent.labels is not None:
            try:
                gold = [label_index[label] for label in sent.labels[:max_len]]
            except KeyError as exc:
                raise ConfigError(
                    f"sentence {sent.id!r} uses label {exc.args[0]!r} "
                    f"outside the inventory {list(labels)}"
                ) from None
        elif require_labels:
            raise ConfigError(f"sentence {sent.id!r} has no labels")
        examples.append(
            Example(
                sentence_id=sent.id,
                token_ids=vocab.encode(sent.tokens[:max_len]),
                context_ids=[
                    vocab.encode(tokenize_text(ctx.text)[:max_len])
                    for ctx in record.contexts
                ],
                gold=gold,
            )
        )
    return examples


def pad_batch(
    examples: Sequence[Example], k: int, pad_len: int | None, max_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stack examples into [B, k+1, T] id/mask arrays, PAD-right."""
    if pad_len is None:
        pad_len = max(
            max((len(ex.token_ids), *(len(c) for c in ex.context_ids)))
            for ex in examples
        )
    pad_len = min(pad_len, max_len)
    ids = np.zeros((len(examples), k + 1, pad_len), dtype=np.int64)
    mask = np.zeros((len(examples), k + 1, pad_len), dtype=bool)
    for b, ex in enumerate(examples):
        rows = [ex.token_ids] + list(ex.context_ids)
        for row, tok_ids in enumerate(rows):
            tok_ids = tok_ids[:pad_len]
            ids[b, row, : len(tok_ids)] = tok_ids
            mask[b, row, : len(tok_ids)] = True
    return ids, mask


def _batches(examples: list[Example], batch_size: int) -> list[list[Example]]:
    return [examples[i : i + batch_size] for i in range(0, len(examples), batch_size)]


def fit(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    examples: Sequence[Example],
    train_cfg: TrainConfig,
    dev: tuple[Sequence[Sentence], Mapping[str, ExternalContexts]] | None = None,
) -> list[dict]:
    """Run the optimization loop in place; returns per-epoch metrics records."""
    if not examples:
        raise ConfigError("no training examples")
    if any(ex.gold is None for ex in examples):
        raise ConfigError("training requires gold labels on every sentence")
    fixed_pad = cfg.encoder.max_len if cfg.fusion_mode == "linear" else None
    n = len(examples)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    optimizer = AdamW(
        params,
        {
            "encoder.": train_cfg.encoder_lr,
            "fusion.": train_cfg.fusion_lr,
            "crf.": train_cfg.crf_lr,
        },
    )
    rng = np.random.default_rng(train_cfg.seed)
    metrics: list[dict] = []
    best_dev_f1 = -1.0
    stale = 0
    step = 0
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        shuffled = [examples[i] for i in perm]
        shuffled.sort(key=lambda ex: len(ex.token_ids))
        batches = _batches(shuffled, train_cfg.batch_size)
        order = rng.permutation(len(batches))
        epoch_nll = 0.0
        for bi in order:
            batch = batches[bi]
            ids, mask = pad_batch(batch, cfg.k, fixed_pad, cfg.encoder.max_len)
            golds = [ex.gold for ex in batch]
            weights = [1.0 / len(batch)] * len(batch)
            nlls, grads = batch_nll_and_grads(params, cfg, ids, mask, golds, weights)
            epoch_nll += sum(nlls)
            optimizer.step(params, grads, lr_schedule(step, total_steps, train_cfg.warmup))
            step += 1
        record = {"epoch": epoch, "train_nll": epoch_nll / n}
        if dev is not None:
            dev_report = evaluate(params, cfg, dev[0], dev[1], batch_size=train_cfg.batch_size)
            record["dev_f1"] = dev_report.f1
            if train_cfg.early_stop:
                if dev_report.f1 > best_dev_f1:
                    best_dev_f1 = dev_report.f1
                    stale = 0
                else:
                    stale += 1
        metrics.append(record)
        if train_cfg.early_stop and dev is not None and stale >= train_cfg.patience:
            break
    return metrics


def train(
    train_cfg: TrainConfig,
    sentences: Sequence[Sentence],
    cache: Mapping[str, ExternalContexts],
    dev: tuple[Sequence[Sentence], Mapping[str, ExternalContexts]] | None = None,
) -> tuple[dict[str, np.ndarray], ModelConfig, list[dict]]:
    """Build vocab/labels from the data, initialize, and fit."""
    if not sentences:
        raise ConfigError("empty training dataset")
    label_set: set[str] = set()
    for sent in sentences:
        if sent.labels is None:
            raise ConfigError(f"sentence {sent.id!r} has no labels")
        label_set.update(sent.labels)
    labels = tuple(sorted(label_set))
    vocab = build_vocab(sentences, cache)
    cfg = ModelConfig(
        encoder=model.EncoderConfig(
            d_model=train_cfg.d_model,
            n_layers=train_cfg.n_layers,
            n_heads=train_cfg.n_heads,
            max_len=train_cfg.max_len,
            vocab=vocab,
            seed=train_cfg.seed,
        ),
        labels=labels,
        k=train_cfg.k,
        p=train_cfg.p,
        fusion_mode=train_cfg.fusion_mode,
    )
    params = model.init_model_params(cfg)
    examples = prepare_examples(
        sentences, cache, vocab, labels, train_cfg.k, train_cfg.max_len, require_labels=True
    )
    metrics = fit(params, cfg, examples, train_cfg, dev=dev)
    return params, cfg, metrics


def evaluate(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    sentences: Sequence[Sentence],
    cache: Mapping[str, ExternalContexts],
    batch_size: int = 32,
) -> EvalReport:
    """Viterbi-decode every sentence, repair BIO, and score exact-match micro PRF."""
    for sent in sentences:
        if sent.labels is None:
            raise ConfigError(f"sentence {sent.id!r} has no gold labels to evaluate")
        missing = set(sent.labels) - set(cfg.labels)
        if missing:
            raise ConfigError(
                f"sentence {sent.id!r} uses labels {sorted(missing)} outside "
                f"the checkpoint inventory"
            )
    examples = prepare_examples(
        sentences, cache, cfg.encoder.vocab, cfg.labels, cfg.k,
        cfg.encoder.max_len, require_labels=False,
    )
    fixed_pad = cfg.encoder.max_len if cfg.fusion_mode == "linear" else None
    by_length = sorted(range(len(examples)), key=lambda i: len(examples[i].token_ids))
    predicted: dict[str, tuple[str, ...]] = {}
    for start in range(0, len(by_length), batch_size):
        chunk = [examples[i] for i in by_length[start : start + batch_size]]
        ids, mask = pad_batch(chunk, cfg.k, fixed_pad, cfg.encoder.max_len)
        for ex, path in zip(chunk, batch_predict(params, cfg, ids, mask)):
            predicted[ex.sentence_id] = repair_bio([cfg.labels[i] for i in path])
    gold_spans = []
    pred_spans = []
    for sent in sentences:
        gold_spans.append(extract_spans(sent.labels))
        labels = predicted[sent.id]
        if len(labels) < len(sent.tokens):
            labels = labels + ("O",) * (len(sent.tokens) - len(labels))
        pred_spans.append(extract_spans(labels))
    return exact_match_prf(gold_spans, pred_spans)
