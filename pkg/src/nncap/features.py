"""Input embeddings and the collision-attention front end.

Covers the per-region positional encoding, obstacle-region embedding, the
collision-attention module (a per-pixel attention map plus a collision
probability head), and the two small CNN encoders that turn the 4-channel
destination/target grids into token sequences for the cross-attention
encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore
from .scenes import GRID_SIZE, MAX_OBSTACLES, OBSTACLE_CLASSES

REGION_VISUAL_DIM = len(OBSTACLE_CLASSES) + 7  # class one-hot + geometry
POS_DIM = 7


@dataclass(frozen=True)
class RegionFeature:
    """One detected region: its feature vector, raw box, and box encoding."""
    visual: np.ndarray          # (32,)
    box: tuple[float, float, float, float]  # normalized (x1, y1, x2, y2)
    pos7: np.ndarray            # (7,)


def encode_positional(box: tuple[float, float, float, float],
                      grid_size: float) -> np.ndarray:
    """Encode a box as (x1, y1, x2, y2, w, h, w*h), coordinates / grid_size.

    The last element is computed as the product of the normalized width and
    height so ``pos7[6] == pos7[4] * pos7[5]`` holds bit-exactly.
    """
    x1, y1, x2, y2 = box
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate box {box}: needs positive width and height")
    nx1, ny1, nx2, ny2 = (x1 / grid_size, y1 / grid_size,
                          x2 / grid_size, y2 / grid_size)
    w = nx2 - nx1
    h = ny2 - ny1
    return np.array([nx1, ny1, nx2, ny2, w, h, w * h])


def region_feature(visual: np.ndarray,
                   box: tuple[float, float, float, float],
                   grid_size: float = GRID_SIZE) -> RegionFeature:
    pos = encode_positional(box, grid_size)
    nbox = (box[0] / grid_size, box[1] / grid_size,
            box[2] / grid_size, box[3] / grid_size)
    return RegionFeature(visual=np.asarray(visual), box=nbox, pos7=pos)


def region_input_matrix(regions: list[RegionFeature],
                        dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack regions into a padded (MAX_OBSTACLES, visual+7) matrix + mask."""
    width = REGION_VISUAL_DIM + POS_DIM
    mat = np.zeros((MAX_OBSTACLES, width), dtype=dtype)
    mask = np.zeros(MAX_OBSTACLES, dtype=bool)
    for i, rf in enumerate(regions[:MAX_OBSTACLES]):
        mat[i] = np.concatenate([rf.visual, rf.pos7]).astype(dtype)
        mask[i] = True
    return mat, mask


# ---------------------------------------------------------------------------
# parameter construction


def build_region_embed_params(store: ParamStore, d_model: int) -> None:
    width = REGION_VISUAL_DIM + POS_DIM
    store.weight("region.proj.w", (width, d_model))
    store.bias("region.proj.b", (d_model,))
    store.ln("region.ln", d_model)


def build_cam_params(store: ParamStore) -> None:
    c = 16
    store.he_weight("cam.conv1.w", (c, 8, 3, 3))
    store.bias("cam.conv1.b", (c,))
    store.he_weight("cam.conv2.w", (c, c, 3, 3))
    store.bias("cam.conv2.b", (c,))
    store.weight("cam.att.w", (1, c, 1, 1))
    store.bias("cam.att.b", (1,))
    store.weight("cam.targ.w", (4, c))
    store.bias("cam.targ.b", (c,))
    store.weight("cam.region.w", (REGION_VISUAL_DIM, c))
    store.bias("cam.region.b", (c,))
    store.weight("cam.pred1.w", (4 * c, 2 * c))
    store.bias("cam.pred1.b", (2 * c,))
    store.weight("cam.pred2.w", (2 * c, 1))
    store.bias("cam.pred2.b", (1,))


def build_encoder_cnn_params(store: ParamStore, d_model: int) -> None:
    # fan-in init: the 0.02-std default collapses conv activations into a
    # near-constant map, which stalls visual grounding for many epochs
    store.he_weight("dest.conv1.w", (32, 5, 3, 3))
    store.bias("dest.conv1.b", (32,))
    store.he_weight("dest.conv2.w", (64, 32, 3, 3))
    store.bias("dest.conv2.b", (64,))
    store.he_weight("dest.conv3.w", (d_model, 64, 3, 3))
    store.bias("dest.conv3.b", (d_model,))
    store.he_weight("targ.conv1.w", (32, 4, 3, 3))
    store.bias("targ.conv1.b", (32,))
    store.he_weight("targ.conv2.w", (64, 32, 3, 3))
    store.bias("targ.conv2.b", (64,))
    store.he_weight("targ.conv3.w", (d_model, 64, 3, 3))
    store.bias("targ.conv3.b", (d_model,))


# ---------------------------------------------------------------------------
# forward passes (all batched: leading axis is the batch)


def embed_obstacles(store: ParamStore, region_mat: Tensor) -> Tensor:
    """(B, 8, visual+7) region inputs -> (B, 8, d_model) tokens."""
    b, n, width = region_mat.shape
    flat = ad.reshape(region_mat, (b * n, width))
    h = ad.bias_add(ad.matmul(flat, store["region.proj.w"]),
                    store["region.proj.b"])
    h = ad.layernorm(h, store["region.ln.g"], store["region.ln.b"])
    return ad.reshape(h, (b, n, store["region.proj.w"].shape[1]))


def cam_collision_logit(store: ParamStore, dest_grid: Tensor,
                        targ_grid: Tensor, region_mat: Tensor,
                        region_mask: np.ndarray,
                        ) -> tuple[Tensor, Tensor]:
    """Pre-sigmoid collision score and the attention map (for BCE training)."""
    if dest_grid.shape[1:] != (4, GRID_SIZE, GRID_SIZE):
        raise ad.ShapeError(f"collision module: dest grid {dest_grid.shape}")
    if targ_grid.shape[1:] != (4, GRID_SIZE, GRID_SIZE):
        raise ad.ShapeError(f"collision module: target grid {targ_grid.shape}")
    b = dest_grid.shape[0]
    x = ad.concat([dest_grid, targ_grid], axis=1)
    x = ad.relu(ad.conv2d(x, store["cam.conv1.w"], store["cam.conv1.b"],
                          stride=1, pad=1))
    trunk = ad.relu(ad.conv2d(x, store["cam.conv2.w"], store["cam.conv2.b"],
                              stride=1, pad=1))
    att_logits = ad.conv2d(trunk, store["cam.att.w"], store["cam.att.b"],
                           stride=1, pad=0)
    att = ad.sigmoid(att_logits)

    # Map-weighted trunk features, pooled two ways: the max picks up
    # point-like collision evidence that a plain average would dilute.
    c = trunk.shape[1]
    npix = GRID_SIZE * GRID_SIZE
    feat = ad.reshape(trunk, (b, c, npix))
    attvec = ad.reshape(att, (b, 1, npix))
    weighted = ad.mul(feat, ad.concat([attvec] * c, axis=1))
    pooled_mean = ad.mean_pool(weighted, axis=-1)
    pooled_max = ad.max_last_axis(weighted)

    targ_mean = ad.reshape(ad.mean_pool(ad.reshape(targ_grid, (b, 4, npix)),
                                        axis=-1), (b, 4))
    targ_h = ad.relu(ad.bias_add(ad.matmul(targ_mean, store["cam.targ.w"]),
                                 store["cam.targ.b"]))

    # Mean of the raw region visuals over real regions (mask renormalized).
    counts = region_mask.sum(axis=1, keepdims=True).clip(min=1)
    weights = (region_mask / counts)[:, None, :].astype(region_mat.dtype)
    visual = ad.narrow(region_mat, 0, REGION_VISUAL_DIM, axis=-1)
    region_mean = ad.reshape(
        ad.matmul(ad.constant(weights, dtype=region_mat.dtype), visual),
        (b, REGION_VISUAL_DIM))
    region_h = ad.relu(ad.bias_add(ad.matmul(region_mean, store["cam.region.w"]),
                                   store["cam.region.b"]))

    h = ad.concat([pooled_max, pooled_mean, targ_h, region_h], axis=-1)
    h = ad.relu(ad.bias_add(ad.matmul(h, store["cam.pred1.w"]),
                            store["cam.pred1.b"]))
    logit = ad.bias_add(ad.matmul(h, store["cam.pred2.w"]), store["cam.pred2.b"])
    return logit, att


def cam_forward(store: ParamStore, dest_grid: Tensor, targ_grid: Tensor,
                region_mat: Tensor, region_mask: np.ndarray,
                ) -> tuple[Tensor, Tensor]:
    """Collision probability and per-pixel attention map.

    ``dest_grid``/``targ_grid`` are (B, 4, 16, 16); the returned attention
    map is (B, 1, 16, 16) in [0, 1] and the probability is (B, 1).
    """
    logit, att = cam_collision_logit(store, dest_grid, targ_grid, region_mat,
                                     region_mask)
    return ad.sigmoid(logit), att


def encode_destination(store: ParamStore, dest_with_att: Tensor) -> Tensor:
    """(B, 5, 16, 16) grid+attention -> (B, 16, d_model) tokens.

    Two stride-2 stages take 16x16 down to 4x4; a final stride-1 stage maps
    into d_model, and the 4x4 map becomes 16 tokens.
    """
    x = ad.relu(ad.conv2d(dest_with_att, store["dest.conv1.w"],
                          store["dest.conv1.b"], stride=2, pad=1))
    x = ad.relu(ad.conv2d(x, store["dest.conv2.w"], store["dest.conv2.b"],
                          stride=2, pad=1))
    x = ad.conv2d(x, store["dest.conv3.w"], store["dest.conv3.b"],
                  stride=1, pad=1)
    b, d, h, w = x.shape
    return ad.transpose_last2(ad.reshape(x, (b, d, h * w)))


def encode_target(store: ParamStore, targ_grid: Tensor) -> Tensor:
    """(B, 4, 16, 16) -> (B, 5, d_model): one pooled token + 4 patch tokens."""
    x = ad.relu(ad.conv2d(targ_grid, store["targ.conv1.w"],
                          store["targ.conv1.b"], stride=2, pad=1))
    x = ad.relu(ad.conv2d(x, store["targ.conv2.w"], store["targ.conv2.b"],
                          stride=2, pad=1))
    x = ad.conv2d(x, store["targ.conv3.w"], store["targ.conv3.b"],
                  stride=2, pad=1)
    b, d, h, w = x.shape
    patches = ad.transpose_last2(ad.reshape(x, (b, d, h * w)))
    pooled = ad.reshape(ad.mean_pool(patches, axis=1), (b, 1, d))
    return ad.concat([pooled, patches], axis=1)
