"""Cross-attentional image encoder.

Two token streams (destination, obstacles) are refined over a stack of
layers.  Each layer cross-attends its stream to the target-object tokens,
then applies feed-forward, multi-head self-attention, and feed-forward
sub-blocks, every sub-block wrapped in a post-norm residual.  The final
streams are concatenated along the token axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import layers as L
from .params import ParamStore


@dataclass
class EncoderState:
    h_img: Tensor
    h_obst: Tensor
    layer_index: int


_SUBLAYERS = ("cross", "ffn1", "mha", "ffn2")


def build_encoder_params(store: ParamStore, d_model: int, n_layers: int) -> None:
    for i in range(n_layers):
        for stream in ("img", "obst"):
            base = f"enc.{i}.{stream}"
            L.build_cross_attention(store, f"{base}.cross", d_model)
            L.build_ffn(store, f"{base}.ffn1", d_model)
            L.build_mha(store, f"{base}.mha", d_model)
            L.build_ffn(store, f"{base}.ffn2", d_model)
            for j, _ in enumerate(_SUBLAYERS):
                store.ln(f"{base}.ln{j}", d_model)


def _stream_layer(store: ParamStore, base: str, x: Tensor, h_targ: Tensor,
                  heads: int, self_mask: np.ndarray | None) -> Tensor:
    x = L.residual_norm(store, f"{base}.ln0", x,
                        L.cross_attention(store, f"{base}.cross", x, h_targ))
    x = L.residual_norm(store, f"{base}.ln1", x, L.ffn(store, f"{base}.ffn1", x))
    x = L.residual_norm(store, f"{base}.ln2", x,
                        L.multi_head_attention(store, f"{base}.mha", x, x,
                                               heads, key_mask=self_mask))
    x = L.residual_norm(store, f"{base}.ln3", x, L.ffn(store, f"{base}.ffn2", x))
    return x


def encoder_layer(store: ParamStore, state: EncoderState, h_targ: Tensor,
                  heads: int, obst_mask: np.ndarray | None) -> EncoderState:
    """Advance both streams one layer; obstacle self-attention masks pads."""
    i = state.layer_index
    h_img = _stream_layer(store, f"enc.{i}.img", state.h_img, h_targ, heads, None)
    h_obst = _stream_layer(store, f"enc.{i}.obst", state.h_obst, h_targ, heads,
                           obst_mask)
    return EncoderState(h_img=h_img, h_obst=h_obst, layer_index=i + 1)


def encode(store: ParamStore, h_dest: Tensor, h_obst: Tensor, h_targ: Tensor,
           n_layers: int, heads: int,
           obst_mask: np.ndarray | None = None,
           ) -> tuple[Tensor, EncoderState]:
    """Run the full stack; returns (h_imgs, final state).

    ``h_imgs`` is the concatenation of the destination and obstacle streams
    along the token axis (so a zero-layer stack returns the inputs).
    """
    state = EncoderState(h_img=h_dest, h_obst=h_obst, layer_index=0)
    for _ in range(n_layers):
        state = encoder_layer(store, state, h_targ, heads, obst_mask)
    h_imgs = ad.concat([state.h_img, state.h_obst], axis=-2)
    return h_imgs, state
