"""Full tagger: multi-channel encoder -> fusion -> emission head -> CRF.

Parameters live in one flat dict with "encoder.", "fusion." and "crf."
prefixes (these are also the optimizer's learning-rate groups). Batches are
[B, K+1, T] id/mask arrays; channel 0 is the sentence, channels 1..K its
retrieved contexts. Losses, gradients and predictions are computed per
sentence over real token positions only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import crf, encoder, fusion
from .bm25 import tokenize_text
from .crf import CrfParams
from .encoder import ChannelBatch, EncoderConfig, Vocab, _uniform_init
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    labels: tuple[str, ...]
    k: int
    p: float
    fusion_mode: str

    def __post_init__(self) -> None:
        fusion.FusionConfig(p=self.p, mode=self.fusion_mode, d_model=self.encoder.d_model)
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if not self.labels:
            raise ConfigError("label inventory is empty")


def init_model_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    seed = cfg.encoder.seed
    d = cfg.encoder.d_model
    n_labels = len(cfg.labels)
    params = {
        "encoder." + name: value
        for name, value in encoder.init_params(cfg.encoder).items()
    }

    def draw(name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        return _uniform_init(seed, name, shape, fan_in)

    if cfg.fusion_mode == "attention":
        fus = fusion.init_attention_params(d, lambda n, s, f: draw("fusion." + n, s, f))
    else:
        fus = fusion.init_linear_params(
            cfg.encoder.max_len, cfg.k, lambda n, s, f: draw("fusion." + n, s, f)
        )
    params.update({"fusion." + name: value for name, value in fus.items()})

    params["crf.w_emit"] = draw("crf.w_emit", (d, n_labels), d)
    params["crf.b_emit"] = np.zeros(n_labels)
    params["crf.trans"] = draw("crf.trans", (n_labels, n_labels), n_labels)
    params["crf.start"] = draw("crf.start", (n_labels,), n_labels)
    params["crf.end"] = draw("crf.end", (n_labels,), n_labels)
    return params


def _sub(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {name[len(prefix):]: arr for name, arr in params.items() if name.startswith(prefix)}


def _crf_params(params: dict[str, np.ndarray]) -> CrfParams:
    return CrfParams(
        w_emit=params["crf.w_emit"],
        b_emit=params["crf.b_emit"],
        trans=params["crf.trans"],
        start=params["crf.start"],
        end=params["crf.end"],
    )


def build_channel_batch(
    tokens: Sequence[str],
    context_texts: Sequence[str],
    vocab: Vocab,
    k: int,
    pad_len: int,
) -> ChannelBatch:
    """Pack one sentence and up to k context texts into a [k+1, pad_len] batch."""
    ids = np.zeros((k + 1, pad_len), dtype=np.int64)
    mask = np.zeros((k + 1, pad_len), dtype=bool)
    rows = [list(tokens)] + [list(tokenize_text(text)) for text in context_texts[:k]]
    for row, toks in enumerate(rows):
        toks = toks[:pad_len]
        ids[row, : len(toks)] = vocab.encode(toks)
        mask[row, : len(toks)] = True
    return ChannelBatch(token_ids=ids, mask=mask)


def _fuse_forward(params, cfg: ModelConfig, h, mask):
    h_x, h_ext = h[:, 0], h[:, 1:]
    fus = _sub(params, "fusion.")
    if cfg.fusion_mode == "attention":
        return fusion.attention_fuse(h_x, h_ext, mask[:, 1:], fus, cfg.p)
    return fusion.linear_fuse(h_x, h_ext, fus)


def _fuse_backward(dh_fusion, fus_cache, params, cfg: ModelConfig, grads):
    fus = _sub(params, "fusion.")
    g_fus = _sub(grads, "fusion.")
    if cfg.fusion_mode == "attention":
        return fusion.attention_fuse_backward(dh_fusion, fus_cache, fus, g_fus)
    return fusion.linear_fuse_backward(dh_fusion, fus_cache, fus, g_fus)


def batch_forward(params, cfg: ModelConfig, ids: np.ndarray, mask: np.ndarray):
    """Encode + fuse a [B, K+1, T] batch; returns (h_fusion, caches)."""
    bsz, channels, t = ids.shape
    h_flat, enc_cache = encoder.encode_forward(
        _sub(params, "encoder."), ids.reshape(bsz * channels, t),
        mask.reshape(bsz * channels, t), cfg.encoder,
    )
    h = h_flat.reshape(bsz, channels, t, cfg.encoder.d_model)
    h_fusion, fus_cache = _fuse_forward(params, cfg, h, mask)
    return h_fusion, {"enc": enc_cache, "fus": fus_cache, "ids": ids, "mask": mask}


def batch_nll_and_grads(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    golds: Sequence[Sequence[int]],
    weights: Sequence[float] | None = None,
) -> tuple[list[float], dict[str, np.ndarray]]:
    """Per-sentence NLLs and the gradient of sum_b weights[b] * nll_b."""
    bsz = ids.shape[0]
    if weights is None:
        weights = [1.0] * bsz
    h_fusion, caches = batch_forward(params, cfg, ids, mask)
    crf_params = _crf_params(params)
    grads = encoder.zero_grads(params)
    d_hfus = np.zeros_like(h_fusion)
    nlls: list[float] = []
    for b in range(bsz):
        n_real = int(mask[b, 0].sum())
        h_rows = h_fusion[b, :n_real]
        em = crf.emissions(h_rows, crf_params)
        loss, d_em, d_tr, d_start, d_end = crf.nll_with_grad(em, golds[b], crf_params)
        nlls.append(loss)
        w = weights[b]
        grads["crf.w_emit"] += h_rows.T @ (w * d_em)
        grads["crf.b_emit"] += w * d_em.sum(axis=0)
        grads["crf.trans"] += w * d_tr
        grads["crf.start"] += w * d_start
        grads["crf.end"] += w * d_end
        d_hfus[b, :n_real] = (w * d_em) @ crf_params.w_emit.T

    dh_x, dh_ext = _fuse_backward(d_hfus, caches["fus"], params, cfg, grads)
    dh = np.concatenate([dh_x[:, None], dh_ext], axis=1)
    bsz, channels, t, d = dh.shape
    encoder.encode_backward(
        dh.reshape(bsz * channels, t, d), caches["enc"],
        _sub(params, "encoder."), cfg.encoder, _sub(grads, "encoder."),
    )
    return nlls, grads


def batch_predict(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
) -> list[list[int]]:
    """Viterbi label-index paths for each sentence in the batch."""
    h_fusion, _ = batch_forward(params, cfg, ids, mask)
    crf_params = _crf_params(params)
    paths: list[list[int]] = []
    for b in range(ids.shape[0]):
        n_real = int(mask[b, 0].sum())
        em = crf.emissions(h_fusion[b, :n_real], crf_params)
        path, _ = crf.viterbi(em, crf_params)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# checkpoint I/O: a single JSON document, diffable and byte-deterministic
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    payload = {
        "config": {
            "d_model": cfg.encoder.d_model,
            "n_layers": cfg.encoder.n_layers,
            "n_heads": cfg.encoder.n_heads,
            "max_len": cfg.encoder.max_len,
            "seed": cfg.encoder.seed,
            "k": cfg.k,
            "p": cfg.p,
            "fusion_mode": cfg.fusion_mode,
        },
        "labels": list(cfg.labels),
        "vocab": list(cfg.encoder.vocab.tokens),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in sorted(params.items())
        },
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    c = obj["config"]
    enc_cfg = EncoderConfig(
        d_model=int(c["d_model"]),
        n_layers=int(c["n_layers"]),
        n_heads=int(c["n_heads"]),
        max_len=int(c["max_len"]),
        vocab=Vocab(obj["vocab"]),
        seed=int(c["seed"]),
    )
    cfg = ModelConfig(
        encoder=enc_cfg,
        labels=tuple(obj["labels"]),
        k=int(c["k"]),
        p=float(c["p"]),
        fusion_mode=c["fusion_mode"],
    )
    params = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in obj["params"].items()
    }
    return params, cfg
