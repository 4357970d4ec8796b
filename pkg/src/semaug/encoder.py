"""Compact trainable transformer encoder with hand-written backpropagation.

Each text channel (the input sentence plus each retrieved text) is encoded
independently through the same weights: self-attention is masked to the
channel's own real tokens, so no information crosses channels and compute
grows linearly with the channel count. All math is float64 so the analytic
gradients can be verified tightly against central finite differences.

Architecture: token embedding + fixed sinusoidal positions, then n_layers
pre-norm blocks (masked self-attention, then a 2-layer GELU feed-forward,
each wrapped in residual adds), then a final layer norm. Output rows at
padding positions are zeroed.

Parameters live in a flat name -> float64 ndarray dict. Every tensor is
drawn from a generator seeded by (seed, tensor name) — and embedding rows
by (seed, token string) — so initialization is bit-reproducible and a
token's initial embedding does not depend on which other tokens happen to
be in the vocabulary.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, EncodingError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

_LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Vocab:
    """Dense token -> id map with reserved PAD=0 and UNK=1."""

    def __init__(self, tokens: Sequence[str]):
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise ConfigError("vocab must start with the PAD and UNK tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocab contains duplicate tokens")
        self.tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, token_sources: Iterable[Iterable[str]]) -> "Vocab":
        """Sorted-unique vocabulary over all tokens in all sources."""
        seen: set[str] = set()
        for source in token_sources:
            seen.update(source)
        seen.discard(PAD_TOKEN)
        seen.discard(UNK_TOKEN)
        return cls((PAD_TOKEN, UNK_TOKEN, *sorted(seen)))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids.get(tok, UNK_ID) for tok in tokens]


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int
    n_layers: int
    n_heads: int
    max_len: int
    vocab: Vocab
    seed: int

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


@dataclass(frozen=True)
class ChannelBatch:
    """Token ids and real-token masks for one sentence's K+1 channels.

    Channel 0 is the input sentence; channels 1..K hold retrieved texts in
    cache order. A missing channel is all-PAD with an all-false mask.
    """

    token_ids: np.ndarray  # [K+1, T] int64
    mask: np.ndarray       # [K+1, T] bool

    def __post_init__(self) -> None:
        if self.token_ids.shape != self.mask.shape or self.token_ids.ndim != 2:
            raise ValueError("token_ids and mask must share a 2-d shape")


@dataclass(frozen=True)
class HiddenStates:
    h_x: np.ndarray          # [T, d_model]
    h_external: np.ndarray   # [K, T, d_model]
    mask_x: np.ndarray       # [T] bool
    mask_external: np.ndarray  # [K, T] bool


def _tensor_rng(seed: int, *names: str) -> np.random.Generator:
    material = [seed % (1 << 64)]
    for name in names:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        material.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(material)


def _uniform_init(seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return _tensor_rng(seed, name).uniform(-bound, bound, size=shape)


def init_params(config: EncoderConfig) -> dict[str, np.ndarray]:
    """Deterministic encoder parameters; biases zero, weights uniform 1/sqrt(fan_in)."""
    d, dff = config.d_model, config.d_ff
    params: dict[str, np.ndarray] = {}

    embed = np.empty((len(config.vocab), d), dtype=np.float64)
    for idx, token in enumerate(config.vocab.tokens):
        rng = _tensor_rng(config.seed, "embed", token)
        embed[idx] = rng.uniform(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d), size=d)
    params["embed"] = embed

    for i in range(config.n_layers):
        p = f"layers.{i}."
        for ln in ("ln1", "ln2"):
            params[p + ln + ".gamma"] = np.ones(d)
            params[p + ln + ".beta"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + w] = _uniform_init(config.seed, p + "attn." + w, (d, d), d)
            params[p + "attn.b" + w[1]] = np.zeros(d)
        params[p + "ff.w1"] = _uniform_init(config.seed, p + "ff.w1", (d, dff), d)
        params[p + "ff.b1"] = np.zeros(dff)
        params[p + "ff.w2"] = _uniform_init(config.seed, p + "ff.w2", (dff, d), dff)
        params[p + "ff.b2"] = np.zeros(d)

    params["ln_f.gamma"] = np.ones(d)
    params["ln_f.beta"] = np.zeros(d)
    return params


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal position table [max_len, d_model]."""
    key = (max_len, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        dim = np.arange(d_model, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d_model)
        pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


# ---------------------------------------------------------------------------
# layer primitives (forward returns a cache consumed by the matching backward)
# ---------------------------------------------------------------------------

def _layer_norm_forward(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xc, inv, xhat, gamma)


def _layer_norm_backward(dy, cache):
    xc, inv, xhat, gamma = cache
    d = xc.shape[-1]
    dxhat = dy * gamma
    dgamma = (dy * xhat).reshape(-1, d).sum(0)
    dbeta = dy.reshape(-1, d).sum(0)
    dvar = (dxhat * xc).sum(-1, keepdims=True) * (-0.5) * inv**3
    dmu = -(dxhat.sum(-1, keepdims=True)) * inv + dvar * (-2.0 / d) * xc.sum(-1, keepdims=True)
    dx = dxhat * inv + dvar * (2.0 / d) * xc + dmu / d
    return dx, dgamma, dbeta


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax where masked entries are -inf; all-masked rows yield zeros."""
    rowmax = scores.max(-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(scores - rowmax)
    denom = e.sum(-1, keepdims=True)
    return e / np.where(denom == 0.0, 1.0, denom)


def _softmax_backward(dw, w):
    return w * (dw - (dw * w).sum(-1, keepdims=True))


def _split_heads(x, n_heads):
    n, t, d = x.shape
    return x.reshape(n, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    n, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, h * dh)


def _attention_forward(a1, mask, params, prefix, n_heads):
    q = a1 @ params[prefix + "wq"] + params[prefix + "bq"]
    k = a1 @ params[prefix + "wk"] + params[prefix + "bk"]
    v = a1 @ params[prefix + "wv"] + params[prefix + "bv"]
    qh, kh, vh = (_split_heads(z, n_heads) for z in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = qh @ kh.swapaxes(-1, -2) * scale
    scores = np.where(mask[:, None, None, :], scores, -np.inf)
    w = _masked_softmax(scores)
    ctx = _merge_heads(w @ vh)
    out = ctx @ params[prefix + "wo"] + params[prefix + "bo"]
    return out, (a1, qh, kh, vh, w, ctx, scale)


def _attention_backward(dout, cache, params, grads, prefix, n_heads):
    a1, qh, kh, vh, w, ctx, scale = cache
    d = a1.shape[-1]

    grads[prefix + "wo"] += np.einsum("ntd,nte->de", ctx, dout)
    grads[prefix + "bo"] += dout.reshape(-1, d).sum(0)
    dctx = _split_heads(dout @ params[prefix + "wo"].T, n_heads)

    dw = dctx @ vh.swapaxes(-1, -2)
    dvh = w.swapaxes(-1, -2) @ dctx
    dscores = _softmax_backward(dw, w)
    dqh = dscores @ kh * scale
    dkh = dscores.swapaxes(-1, -2) @ qh * scale

    da1 = np.zeros_like(a1)
    for name, dzh in (("wq", dqh), ("wk", dkh), ("wv", dvh)):
        dz = _merge_heads(dzh)
        grads[prefix + name] += np.einsum("ntd,nte->de", a1, dz)
        grads[prefix + "b" + name[1]] += dz.reshape(-1, d).sum(0)
        da1 += dz @ params[prefix + name].T
    return da1


# ---------------------------------------------------------------------------
# full encoder forward / backward over a stack of channels
# ---------------------------------------------------------------------------

def encode_forward(
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    mask: np.ndarray,
    config: EncoderConfig,
) -> tuple[np.ndarray, dict]:
    """Encode a channel stack ids/mask [N, T] -> hidden states [N, T, d_model].

    Channels attend only within themselves and only to real tokens; output
    rows at padding positions are exactly zero.
    """
    if ids.shape != mask.shape or ids.ndim != 2:
        raise ValueError("ids and mask must share a 2-d shape")
    if ids.size and (ids.min() < 0 or ids.max() >= len(config.vocab)):
        raise EncodingError(
            f"token ids must be in [0, {len(config.vocab)}); map unknowns to UNK"
        )
    t = ids.shape[1]
    if t > config.max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {config.max_len}")

    x = params["embed"][ids] + positional_encoding(config.max_len, config.d_model)[:t]
    cache: dict = {"ids": ids, "mask": mask, "layers": []}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        a1, ln1_cache = _layer_norm_forward(x, params[p + "ln1.gamma"], params[p + "ln1.beta"])
        attn_out, attn_cache = _attention_forward(a1, mask, params, p + "attn.", config.n_heads)
        x = x + attn_out
        a2, ln2_cache = _layer_norm_forward(x, params[p + "ln2.gamma"], params[p + "ln2.beta"])
        z1 = a2 @ params[p + "ff.w1"] + params[p + "ff.b1"]
        g = _gelu(z1)
        x = x + g @ params[p + "ff.w2"] + params[p + "ff.b2"]
        cache["layers"].append((ln1_cache, attn_cache, ln2_cache, a2, z1, g))
    xf, lnf_cache = _layer_norm_forward(x, params["ln_f.gamma"], params["ln_f.beta"])
    cache["ln_f"] = lnf_cache
    h = xf * mask[:, :, None]
    return h, cache


def encode_backward(
    dh: np.ndarray,
    cache: dict,
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for encode_forward into `grads`."""
    mask = cache["mask"]
    dxf = dh * mask[:, :, None]
    dx, dgf, dbf = _layer_norm_backward(dxf, cache["ln_f"])
    grads["ln_f.gamma"] += dgf
    grads["ln_f.beta"] += dbf

    for i in range(config.n_layers - 1, -1, -1):
        p = f"layers.{i}."
        ln1_cache, attn_cache, ln2_cache, a2, z1, g = cache["layers"][i]
        d = config.d_model

        # feed-forward branch of x = x + gelu(a2 W1 + b1) W2 + b2
        dg = dx @ params[p + "ff.w2"].T
        grads[p + "ff.w2"] += np.einsum("ntf,ntd->fd", g, dx)
        grads[p + "ff.b2"] += dx.reshape(-1, d).sum(0)
        dz1 = dg * _gelu_grad(z1)
        grads[p + "ff.w1"] += np.einsum("ntd,ntf->df", a2, dz1)
        grads[p + "ff.b1"] += dz1.reshape(-1, config.d_ff).sum(0)
        da2 = dz1 @ params[p + "ff.w1"].T
        dx2, dg2, db2 = _layer_norm_backward(da2, ln2_cache)
        grads[p + "ln2.gamma"] += dg2
        grads[p + "ln2.beta"] += db2
        dx = dx + dx2

        # attention branch of x = x + attn(ln1(x))
        da1 = _attention_backward(dx, attn_cache, params, grads, p + "attn.", config.n_heads)
        dx1, dg1, db1 = _layer_norm_backward(da1, ln1_cache)
        grads[p + "ln1.gamma"] += dg1
        grads[p + "ln1.beta"] += db1
        dx = dx + dx1

    np.add.at(grads["embed"], cache["ids"].reshape(-1), dx.reshape(-1, config.d_model))


def encode_channels(params: dict[str, np.ndarray], batch: ChannelBatch,
                    config: EncoderConfig) -> HiddenStates:
    """Encode one sentence's channel stack into H_x and H_external."""
    h, _ = encode_forward(params, batch.token_ids, batch.mask, config)
    return HiddenStates(
        h_x=h[0],
        h_external=h[1:],
        mask_x=batch.mask[0],
        mask_external=batch.mask[1:],
    )


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in params.items()}


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_difference_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    eps: float,
    *,
    min_samples: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Coordinates are sampled deterministically: at least ceil(min_samples /
    n_tensors) from every parameter tensor, so the sample spans all tensors.
    The relative error divides by max(|fd|, |analytic|, tau) with
    tau = 1e-4 * max(1, gmax); gmax is the largest analytic-gradient
    magnitude, so coordinates whose gradients sit at the finite-difference
    noise floor cannot dominate the report.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be > 0, got {eps}")
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {loss}")

    names = sorted(params)
    rng = np.random.default_rng(seed)
    per_tensor = max(1, -(-min_samples // len(names)))
    gmax = max(float(np.max(np.abs(grads[name]))) for name in names)
    tau = 1e-4 * max(1.0, gmax)

    worst = 0.0
    for name in names:
        size = params[name].size
        count = min(per_tensor, size)
        flat_idx = rng.choice(size, size=count, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), params[name].shape)
            original = params[name][idx]
            params[name][idx] = original + eps
            f_plus = loss_fn(params)[0]
            params[name][idx] = original - eps
            f_minus = loss_fn(params)[0]
            params[name][idx] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("perturbed loss is not finite")
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = float(grads[name][idx])
            err = abs(fd - an) / max(abs(fd), abs(an), tau)
            worst = max(worst, err)
    return worst
