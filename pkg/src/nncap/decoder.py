"""Multimodal decoder: text fusion, cross-attention layers, token head.

``fuse_multimodal`` runs a single causal transformer-encoder block over a
pooled-image prefix token plus the embedded text, producing per-position
text states (h_mul) and a pooled text embedding for the contrastive loss.
``decode`` then cross-attends those states to the encoded image tokens and
emits next-token distributions; the latent fed into the last layer's
feed-forward block is exposed as ``z`` for the retrieval module.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import layers as L
from .data import BOS_ID, PAD_ID
from .params import ParamStore

MAX_CAPTION_LEN = 26


@dataclass
class DecoderOutput:
    p_next: Tensor   # (B, T, V), rows sum to 1
    z: Tensor        # (B, T, d) latent entering the final feed-forward
    logits: Tensor   # (B, T, V) pre-softmax scores


def build_text_params(store: ParamStore, d_model: int, vocab_size: int) -> None:
    store.weight("txt.emb", (vocab_size, d_model))
    store.weight("txt.pos", (MAX_CAPTION_LEN + 2, d_model))
    L.build_mha(store, "txt.mha", d_model)
    store.ln("txt.ln0", d_model)
    L.build_ffn(store, "txt.ffn", d_model)
    store.ln("txt.ln1", d_model)


def build_decoder_params(store: ParamStore, d_model: int, n_layers: int,
                         vocab_size: int) -> None:
    for i in range(n_layers):
        base = f"dec.{i}"
        L.build_cross_attention(store, f"{base}.cross", d_model)
        store.ln(f"{base}.ln0", d_model)
        L.build_ffn(store, f"{base}.ffn", d_model)
        store.ln(f"{base}.ln1", d_model)
    L.build_affine(store, "dec.head", d_model, vocab_size)


def fuse_multimodal(store: ParamStore, h_img_pooled: Tensor,
                    token_ids: np.ndarray, heads: int = 4,
                    ) -> tuple[Tensor, Tensor]:
    """Fuse text with the pooled image token under a causal mask.

    ``token_ids`` is (B, T) and must start with BOS; sequences longer than
    BOS + MAX_CAPTION_LEN are truncated with a warning.  Returns
    ``(h_mul, h_txt)``: per-position text states and the mean state over
    real (non-pad) text positions.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ad.ShapeError(f"fuse_multimodal: token_ids must be (B, T), got {token_ids.shape}")
    if not np.all(token_ids[:, 0] == BOS_ID):
        raise ValueError("fuse_multimodal: every sequence must begin with BOS")
    if token_ids.shape[1] > MAX_CAPTION_LEN + 1:
        warnings.warn(
            f"token sequence of length {token_ids.shape[1]} exceeds "
            f"{MAX_CAPTION_LEN + 1}; truncating", stacklevel=2)
        token_ids = token_ids[:, :MAX_CAPTION_LEN + 1]
    b, t = token_ids.shape
    d = h_img_pooled.shape[-1]

    emb = ad.embedding_lookup(store["txt.emb"], token_ids)
    pos = ad.embedding_lookup(store["txt.pos"], np.arange(1, t + 1))
    emb = ad.add(emb, ad.tile_leading(ad.reshape(pos, (1, t, d)), b))

    img_pos = ad.embedding_lookup(store["txt.pos"], np.array([[0]]))
    img_tok = ad.add(ad.reshape(h_img_pooled, (b, 1, d)),
                     ad.tile_leading(img_pos, b))
    x = ad.concat([img_tok, emb], axis=-2)

    x = L.residual_norm(store, "txt.ln0", x,
                        L.multi_head_attention(store, "txt.mha", x, x, heads,
                                               causal=True))
    x = L.residual_norm(store, "txt.ln1", x, L.ffn(store, "txt.ffn", x))
    h_mul = ad.narrow(x, 1, t, axis=-2)

    valid = (token_ids != PAD_ID).astype(np.float64)
    weights = (valid / valid.sum(axis=1, keepdims=True))[:, None, :]
    h_txt = ad.reshape(
        ad.matmul(ad.constant(weights, dtype=store.dtype), h_mul), (b, d))
    return h_mul, h_txt


def decode(store: ParamStore, h_mul: Tensor, h_imgs: Tensor,
           n_layers: int, imgs_mask: np.ndarray | None = None) -> DecoderOutput:
    """Cross-attend text states to image tokens and score next tokens."""
    if h_imgs.shape[-2] == 0:
        raise ValueError("decode: empty image token sequence")
    x = h_mul
    z = None
    for i in range(n_layers):
        base = f"dec.{i}"
        att = L.cross_attention(store, f"{base}.cross", x, h_imgs,
                                key_mask=imgs_mask)
        x = L.residual_norm(store, f"{base}.ln0", x, att)
        if i == n_layers - 1:
            z = x
        x = L.residual_norm(store, f"{base}.ln1", x, L.ffn(store, f"{base}.ffn", x))
    logits = L.affine(store, "dec.head", x)
    return DecoderOutput(p_next=ad.softmax(logits, axis=-1), z=z, logits=logits)
