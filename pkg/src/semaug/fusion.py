"""Semantic fusion of the input representation with retrieved-text states.

Attention mode: single-head scaled dot-product cross-attention. Queries come
from the input states H_x, keys and values from the concatenation of all
external channels' token states; padding keys are masked to -inf before the
softmax. The fused output interpolates
    H_fusion = p * H_x + (1 - p) * H_context
so p = 1 ignores external knowledge entirely. With no external channels (or
all of them fully padded) fusion degenerates to the identity on H_x
regardless of p.

Linear mode: the appendix baseline. All K+1 channels are stacked along the
sequence axis and mixed by one [L, (K+1)*L] matrix shared across hidden
dimensions, plus a per-output-position bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

FUSION_MODES = ("attention", "linear")


@dataclass(frozen=True)
class FusionConfig:
    p: float
    mode: str
    d_model: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"fusion factor p must be in [0, 1], got {self.p}")
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")


def init_attention_params(d_model: int, init) -> dict[str, np.ndarray]:
    """Q/K/V projections; `init(name, shape, fan_in)` draws each tensor."""
    return {name: init(name, (d_model, d_model), d_model) for name in ("wq", "wk", "wv")}


def init_linear_params(max_len: int, k: int, init) -> dict[str, np.ndarray]:
    stacked = (k + 1) * max_len
    return {
        "w_lin": init("w_lin", (max_len, stacked), stacked),
        "bias": np.zeros(max_len),
    }


def attention_fuse(
    h_x: np.ndarray,
    h_external: np.ndarray,
    mask_external: np.ndarray,
    params: dict[str, np.ndarray],
    p: float,
) -> tuple[np.ndarray, dict]:
    """Fuse [B, L, d] input states with [B, K, L, d] external states.

    Returns (h_fusion, cache); cache["weights"] holds the [B, L, K*L]
    attention distribution (all-zero rows for items without external keys).
    """
    if h_x.ndim != 3 or h_external.ndim != 4 or h_external.shape[0] != h_x.shape[0]:
        raise ValueError(
            f"inconsistent shapes h_x={h_x.shape}, h_external={h_external.shape}"
        )
    if h_external.shape[3] != h_x.shape[2]:
        raise ValueError("h_x and h_external disagree on d_model")
    bsz, seq_len, d = h_x.shape
    n_keys = h_external.shape[1] * h_external.shape[2]
    keys_in = h_external.reshape(bsz, n_keys, d)
    key_mask = mask_external.reshape(bsz, n_keys)
    has_keys = key_mask.any(axis=1)  # [B]

    cache: dict = {"p": p, "has_keys": has_keys, "h_x": h_x, "keys_in": keys_in,
                   "key_mask": key_mask, "ext_shape": h_external.shape}

    if p == 1.0 or not has_keys.any() or n_keys == 0:
        # Identity fast path: externals are inert, H_fusion is exactly H_x.
        cache["identity"] = True
        cache["weights"] = np.zeros((bsz, seq_len, n_keys))
        return h_x.copy(), cache
    cache["identity"] = False

    q = h_x @ params["wq"]
    k = keys_in @ params["wk"]
    v = keys_in @ params["wv"]
    scores = q @ k.swapaxes(-1, -2) / math.sqrt(d)
    scores = np.where(key_mask[:, None, :], scores, -np.inf)
    rowmax = scores.max(-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(scores - rowmax)
    denom = e.sum(-1, keepdims=True)
    weights = e / np.where(denom == 0.0, 1.0, denom)
    h_context = weights @ v

    if p == 0.0:
        h_fusion = h_context.copy()
    else:
        h_fusion = p * h_x + (1.0 - p) * h_context
    # Items with no unmasked external token degenerate to the identity.
    h_fusion[~has_keys] = h_x[~has_keys]

    cache.update({"q": q, "k": k, "v": v, "weights": weights})
    return h_fusion, cache


def attention_fuse_backward(
    dh_fusion: np.ndarray,
    cache: dict,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. h_x and h_external; parameter grads accumulate in `grads`."""
    p = cache["p"]
    h_x, keys_in = cache["h_x"], cache["keys_in"]
    ext_shape = cache["ext_shape"]
    if cache["identity"]:
        return dh_fusion.copy(), np.zeros(ext_shape)

    has_keys = cache["has_keys"]
    weights, q, k, v = cache["weights"], cache["q"], cache["k"], cache["v"]
    d = h_x.shape[2]

    dh_x = np.where(has_keys[:, None, None], p * dh_fusion, dh_fusion)
    dh_context = (1.0 - p) * dh_fusion
    dh_context = np.where(has_keys[:, None, None], dh_context, 0.0)

    dweights = dh_context @ v.swapaxes(-1, -2)
    dv = weights.swapaxes(-1, -2) @ dh_context
    dscores = weights * (dweights - (dweights * weights).sum(-1, keepdims=True))
    dq = dscores @ k / math.sqrt(d)
    dk = dscores.swapaxes(-1, -2) @ q / math.sqrt(d)

    grads["wq"] += np.einsum("bld,ble->de", h_x, dq)
    grads["wk"] += np.einsum("bsd,bse->de", keys_in, dk)
    grads["wv"] += np.einsum("bsd,bse->de", keys_in, dv)

    dh_x += dq @ params["wq"].T
    dkeys = dk @ params["wk"].T + dv @ params["wv"].T
    return dh_x, dkeys.reshape(ext_shape)


def linear_fuse(
    h_x: np.ndarray,
    h_external: np.ndarray,
    params: dict[str, np.ndarray],
) -> tuple[np.ndarray, dict]:
    """Mix the stacked [B, (K+1)*L, d] states into [B, L, d] with one matrix.

    output[b, l, :] = sum_s w_lin[l, s] * stacked[b, s, :] + bias[l]
    """
    bsz, seq_len, d = h_x.shape
    w_lin = params["w_lin"]
    stacked = np.concatenate([h_x[:, None], h_external], axis=1).reshape(bsz, -1, d)
    if w_lin.shape != (seq_len, stacked.shape[1]):
        raise ValueError(
            f"w_lin shape {w_lin.shape} does not match L={seq_len}, "
            f"(K+1)*L={stacked.shape[1]}"
        )
    h_fusion = np.einsum("ls,bsd->bld", w_lin, stacked) + params["bias"][None, :, None]
    return h_fusion, {"stacked": stacked, "ext_shape": h_external.shape}


def linear_fuse_backward(
    dh_fusion: np.ndarray,
    cache: dict,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    stacked = cache["stacked"]
    ext_shape = cache["ext_shape"]
    bsz, seq_len, d = dh_fusion.shape
    grads["w_lin"] += np.einsum("bld,bsd->ls", dh_fusion, stacked)
    grads["bias"] += dh_fusion.sum(axis=(0, 2))
    dstacked = np.einsum("ls,bld->bsd", params["w_lin"], dh_fusion)
    dstacked = dstacked.reshape(bsz, ext_shape[1] + 1, ext_shape[2], d)
    return dstacked[:, 0], dstacked[:, 1:]
