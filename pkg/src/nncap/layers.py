"""Shared transformer building blocks over a ParamStore.

Every block takes the store plus a name prefix, so the encoder and decoder
can stamp out independently-parameterized copies.  Tensors are batched:
token sequences are (B, T, d).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore

NEG_INF = float("-inf")


def build_affine(store: ParamStore, name: str, d_in: int, d_out: int) -> None:
    store.weight(f"{name}.w", (d_in, d_out))
    store.bias(f"{name}.b", (d_out,))


def affine(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.bias_add(ad.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def build_ffn(store: ParamStore, name: str, d: int, hidden: int | None = None) -> None:
    hidden = hidden or 4 * d
    build_affine(store, f"{name}.in", d, hidden)
    build_affine(store, f"{name}.out", hidden, d)


def ffn(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return affine(store, f"{name}.out", ad.relu(affine(store, f"{name}.in", x)))


def residual_norm(store: ParamStore, name: str, x: Tensor, sub: Tensor) -> Tensor:
    """Post-norm residual: layernorm(x + sublayer(x))."""
    return ad.layernorm(ad.add(x, sub), store[f"{name}.g"], store[f"{name}.b"])


# ---------------------------------------------------------------------------
# attention


def build_cross_attention(store: ParamStore, name: str, d: int) -> None:
    store.weight(f"{name}.wq", (d, d))
    store.weight(f"{name}.wk", (d, d))
    store.weight(f"{name}.wv", (d, d))


def cross_attention(store: ParamStore, name: str, x_a: Tensor, x_b: Tensor,
                    key_mask: np.ndarray | None = None,
                    return_weights: bool = False):
    """softmax(d^-1/2 (X_A Wq)(X_B Wk)^T)(X_B Wv) over the last two axes.

    ``x_a`` supplies the queries, ``x_b`` the keys/values; both may be
    (T, d) or batched (B, T, d).  ``key_mask`` marks valid keys; masked
    keys receive exactly zero attention weight.
    """
    if x_b.shape[-2] == 0:
        raise ValueError("cross_attention: empty key/value sequence")
    d = store[f"{name}.wq"].shape[0]
    q = ad.matmul(x_a, store[f"{name}.wq"])
    k = ad.matmul(x_b, store[f"{name}.wk"])
    v = ad.matmul(x_b, store[f"{name}.wv"])
    scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(d))
    if key_mask is not None:
        scores = ad.masked_fill(scores, _expand_key_mask(key_mask, scores.shape), NEG_INF)
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def _expand_key_mask(key_mask: np.ndarray, score_shape) -> np.ndarray:
    """(.., Tk) validity mask -> boolean fill-mask of the score shape."""
    invalid = ~np.asarray(key_mask, dtype=bool)
    if invalid.ndim == 1:
        grown = np.broadcast_to(invalid, score_shape)
    else:
        grown = np.broadcast_to(invalid[:, None, :], score_shape)
    return np.ascontiguousarray(grown)


def build_mha(store: ParamStore, name: str, d: int) -> None:
    for part in ("wq", "wk", "wv", "wo"):
        build_affine(store, f"{name}.{part}", d, d)


def multi_head_attention(store: ParamStore, name: str, x_q: Tensor,
                         x_kv: Tensor, heads: int,
                         key_mask: np.ndarray | None = None,
                         causal: bool = False,
                         return_weights: bool = False):
    """Standard multi-head attention with optional key and causal masks."""
    d = x_q.shape[-1]
    if d % heads:
        raise ValueError(f"d_model {d} not divisible by {heads} heads")
    dh = d // heads
    q = affine(store, f"{name}.wq", x_q)
    k = affine(store, f"{name}.wk", x_kv)
    v = affine(store, f"{name}.wv", x_kv)
    tq, tk = x_q.shape[-2], x_kv.shape[-2]

    fill = None
    if key_mask is not None:
        score_shape = (*q.shape[:-2], tq, tk)
        fill = _expand_key_mask(key_mask, score_shape)
    if causal:
        tri = np.triu(np.ones((tq, tk), dtype=bool), k=1)
        tri = np.broadcast_to(tri, (*q.shape[:-2], tq, tk))
        fill = tri if fill is None else (fill | tri)

    outs = []
    all_weights = []
    for h in range(heads):
        qh = ad.narrow(q, h * dh, dh, axis=-1)
        kh = ad.narrow(k, h * dh, dh, axis=-1)
        vh = ad.narrow(v, h * dh, dh, axis=-1)
        scores = ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), 1.0 / np.sqrt(dh))
        if fill is not None:
            scores = ad.masked_fill(scores, fill, NEG_INF)
        w = ad.softmax(scores, axis=-1)
        all_weights.append(w)
        outs.append(ad.matmul(w, vh))
    out = affine(store, f"{name}.wo", ad.concat(outs, axis=-1))
    if return_weights:
        return out, all_weights
    return out
