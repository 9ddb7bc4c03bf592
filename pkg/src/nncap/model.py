"""Full captioning model: parameter construction, forward passes,
greedy generation, and datastore construction.

Parameters are declared eagerly in a fixed order at construction so that a
given seed always produces the same initialization, independent of which
forward paths run afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoder as enc
from . import features as feat
from . import retrieval
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, PAD_ID, Sample, Vocabulary
from .params import ParamStore
from .scenes import GRID_SIZE, MAX_OBSTACLES


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    max_caption_len: int = dec.MAX_CAPTION_LEN
    dtype: type = np.float32


@dataclass
class Batch:
    dest: np.ndarray          # (B, 4, 16, 16)
    targ: np.ndarray          # (B, 4, 16, 16)
    regions: np.ndarray       # (B, 8, 39)
    region_mask: np.ndarray   # (B, 8) bool
    input_ids: np.ndarray     # (B, T) BOS + caption, right-padded
    target_ids: np.ndarray    # (B, T) caption + EOS, right-padded
    labels: np.ndarray        # (B, 1) collision labels as floats


def collate(samples: list[Sample], dtype=np.float32) -> Batch:
    b = len(samples)
    if b == 0:
        raise ValueError("collate: empty batch")
    dest = np.stack([s.dest_grid for s in samples]).astype(dtype)
    targ = np.stack([s.targ_grid for s in samples]).astype(dtype)
    regions = np.zeros((b, MAX_OBSTACLES, feat.REGION_VISUAL_DIM + feat.POS_DIM),
                       dtype=dtype)
    region_mask = np.zeros((b, MAX_OBSTACLES), dtype=bool)
    for i, s in enumerate(samples):
        mat, mask = feat.region_input_matrix(s.regions, dtype=dtype)
        regions[i] = mat
        region_mask[i] = mask
    caps = [s.caption_train[:dec.MAX_CAPTION_LEN] for s in samples]
    t = max(len(c) for c in caps) + 1
    input_ids = np.full((b, t), PAD_ID, dtype=np.int64)
    target_ids = np.full((b, t), PAD_ID, dtype=np.int64)
    for i, c in enumerate(caps):
        input_ids[i, 0] = BOS_ID
        input_ids[i, 1:1 + len(c)] = c
        target_ids[i, :len(c)] = c
        target_ids[i, len(c)] = EOS_ID
    labels = np.array([[float(s.collision_label)] for s in samples], dtype=dtype)
    return Batch(dest=dest, targ=targ, regions=regions, region_mask=region_mask,
                 input_ids=input_ids, target_ids=target_ids, labels=labels)


@dataclass
class ImageEncoding:
    h_imgs: Tensor        # (B, 16+8, d)
    imgs_mask: np.ndarray  # (B, 24) key validity
    pooled: Tensor        # (B, d) mean of the destination stream


@dataclass
class ForwardResult:
    output: dec.DecoderOutput
    pooled_image: Tensor
    pooled_text: Tensor


class CaptionModel:
    """Owns the parameter store and the end-to-end forward passes."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.store = ParamStore(rng, dtype=config.dtype)
        d = config.d_model
        feat.build_region_embed_params(self.store, d)
        feat.build_cam_params(self.store)
        feat.build_encoder_cnn_params(self.store, d)
        enc.build_encoder_params(self.store, d, config.encoder_layers)
        dec.build_text_params(self.store, d, config.vocab_size)
        dec.build_decoder_params(self.store, d, config.decoder_layers,
                                 config.vocab_size)

    # -- collision-attention front end --------------------------------------

    def cam_forward(self, batch: Batch) -> tuple[Tensor, Tensor]:
        return feat.cam_forward(
            self.store,
            ad.constant(batch.dest, dtype=self.config.dtype),
            ad.constant(batch.targ, dtype=self.config.dtype),
            ad.constant(batch.regions, dtype=self.config.dtype),
            batch.region_mask)

    def attention_maps(self, samples: list[Sample], batch_size: int = 64,
                       disabled: bool = False) -> np.ndarray:
        """Frozen attention maps for a whole sample list, (N, 1, 16, 16)."""
        n = len(samples)
        if disabled:
            return np.zeros((n, 1, GRID_SIZE, GRID_SIZE), dtype=self.config.dtype)
        maps = []
        with ad.no_grad():
            for i in range(0, n, batch_size):
                batch = collate(samples[i:i + batch_size], dtype=self.config.dtype)
                _, att = self.cam_forward(batch)
                maps.append(att.data)
        return np.concatenate(maps, axis=0)

    # -- captioning paths ----------------------------------------------------

    def encode_image(self, batch: Batch, att: np.ndarray) -> ImageEncoding:
        cfg = self.config
        dest5 = np.concatenate([batch.dest, att.astype(batch.dest.dtype)], axis=1)
        h_dest = feat.encode_destination(self.store,
                                         ad.constant(dest5, dtype=cfg.dtype))
        h_targ = feat.encode_target(self.store,
                                    ad.constant(batch.targ, dtype=cfg.dtype))
        h_obst = feat.embed_obstacles(self.store,
                                      ad.constant(batch.regions, dtype=cfg.dtype))
        h_imgs, state = enc.encode(self.store, h_dest, h_obst, h_targ,
                                   cfg.encoder_layers, cfg.heads,
                                   obst_mask=batch.region_mask)
        b = batch.dest.shape[0]
        dest_tokens = h_dest.shape[-2]
        imgs_mask = np.concatenate(
            [np.ones((b, dest_tokens), dtype=bool), batch.region_mask], axis=1)
        pooled = ad.mean_pool(state.h_img, axis=-2)
        return ImageEncoding(h_imgs=h_imgs, imgs_mask=imgs_mask, pooled=pooled)

    def forward(self, batch: Batch, att: np.ndarray) -> ForwardResult:
        """Teacher-forced pass producing next-token scores and the pooled
        image/text embeddings for the contrastive loss."""
        cfg = self.config
        image = self.encode_image(batch, att)
        h_mul, h_txt = dec.fuse_multimodal(self.store, image.pooled,
                                           batch.input_ids, heads=cfg.heads)
        out = dec.decode(self.store, h_mul, image.h_imgs, cfg.decoder_layers,
                         imgs_mask=image.imgs_mask)
        return ForwardResult(output=out, pooled_image=image.pooled,
                             pooled_text=h_txt)

    def greedy_generate(self, sample: Sample, att: np.ndarray,
                        datastore: retrieval.Datastore | None = None,
                        n_neighbors: int = 64,
                        knn_weight: float = 0.25) -> list[int]:
        """Greedy decode one sample, optionally rescoring each step with the
        neighbor memory.  Stops at EOS or the caption-length cap; argmax
        ties resolve to the lowest token id."""
        cfg = self.config
        batch = collate([sample], dtype=cfg.dtype)
        with ad.no_grad():
            image = self.encode_image(batch, att)
            ids = [BOS_ID]
            out_tokens: list[int] = []
            for _ in range(cfg.max_caption_len):
                token_ids = np.array([ids], dtype=np.int64)
                h_mul, _ = dec.fuse_multimodal(self.store, image.pooled,
                                               token_ids, heads=cfg.heads)
                out = dec.decode(self.store, h_mul, image.h_imgs,
                                 cfg.decoder_layers, imgs_mask=image.imgs_mask)
                p = out.p_next.data[0, -1].astype(np.float64)
                if datastore is not None:
                    z = out.z.data[0, -1]
                    ns = retrieval.knn_query(datastore, z, n_neighbors)
                    p_knn = retrieval.aggregate(ns, cfg.vocab_size)
                    p = retrieval.interpolate(p_knn, p, knn_weight)
                tok = int(np.argmax(p))
                if tok == EOS_ID:
                    break
                out_tokens.append(tok)
                ids.append(tok)
        return out_tokens

    def build_datastore(self, samples: list[Sample],
                        att: np.ndarray,
                        batch_size: int = 64) -> retrieval.Datastore:
        """Teacher-force the training captions and store one (latent, next
        token) pair per position t = 1..T-1 of each caption."""
        if not samples:
            raise ValueError("build_datastore: empty training set")
        keys: list[np.ndarray] = []
        values: list[int] = []
        cfg = self.config
        with ad.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                batch = collate(chunk, dtype=cfg.dtype)
                result = self.forward(batch, att[start:start + batch_size])
                z = result.output.z.data
                for i, s in enumerate(chunk):
                    cap = s.caption_train[:cfg.max_caption_len]
                    # position t consumed tokens 1..t; its target is y_{t+1}
                    for t in range(1, len(cap)):
                        keys.append(z[i, t])
                        values.append(cap[t])
        return retrieval.Datastore(
            keys=np.array(keys, dtype=np.float32),
            values=np.array(values, dtype=np.uint32))
