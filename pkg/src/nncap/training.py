"""Losses, optimizer, early stopping, and the end-to-end training loops.

Training is two-stage: the collision-attention front end is pre-trained on
the binary collision labels for a fixed number of epochs and frozen, then
the captioning model trains on a weighted sum of token cross-entropy and a
symmetric InfoNCE term, with early stopping on the generalization loss
(relative regret of the validation loss against its running minimum).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, PAD_ID, Sample
from .decoder import DecoderOutput
from .model import Batch, CaptionModel, ModelConfig, collate
from .params import ParamStore

LOG_MAGIC = "NNCAPLOG"
LOG_VERSION = 1


@dataclass
class TrainConfig:
    ce_weight: float = 0.9
    nce_weight: float = 5.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 30
    gl_threshold: float = 5.0
    nce_temperature: float = 0.07
    seed: int = 0
    cam_epochs: int = 10
    cam_lr: float = 1e-2

    def __post_init__(self):
        for name in ("ce_weight", "nce_weight", "lr", "batch_size",
                     "max_epochs", "gl_threshold", "nce_temperature"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive and finite, got {v}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_ce: float
    val_loss: float
    best_val_loss: float
    gl: float
    stopped: bool = False


# ---------------------------------------------------------------------------
# losses


def infonce(h_img: Tensor, h_txt: Tensor, temperature: float) -> Tensor:
    """Symmetric in-batch contrastive loss on unit-normalized embeddings."""
    b = h_img.shape[0]
    img = ad.l2_normalize_rows(h_img)
    txt = ad.l2_normalize_rows(h_txt)
    sim = ad.scale(ad.matmul(img, ad.transpose_last2(txt)), 1.0 / temperature)
    diag = np.arange(b)
    loss_i = ad.cross_entropy(sim, diag)
    loss_t = ad.cross_entropy(ad.transpose_last2(sim), diag)
    return ad.scale(ad.add(loss_i, loss_t), 0.5)


def loss_total(output: DecoderOutput, target_ids: np.ndarray,
               h_img_pooled: Tensor, h_txt_pooled: Tensor,
               cfg: TrainConfig) -> tuple[Tensor, float, float]:
    """Weighted sum of token cross-entropy (pads ignored) and InfoNCE.

    Returns the scalar loss tensor plus the two unweighted components.
    """
    b, t, v = output.logits.shape
    if b == 0:
        raise ValueError("loss_total: empty batch")
    flat = ad.reshape(output.logits, (b * t, v))
    ce = ad.cross_entropy(flat, target_ids.reshape(-1), ignore_id=PAD_ID)
    nce = infonce(h_img_pooled, h_txt_pooled, cfg.nce_temperature)
    total = ad.add(ad.scale(ce, cfg.ce_weight), ad.scale(nce, cfg.nce_weight))
    return total, ce.item(), nce.item()


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient for parameter {name!r} at step {t}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# early stopping


def generalization_loss(val_loss: float, best_val_loss: float) -> float:
    """Percent regret of the current validation loss over the best so far."""
    if best_val_loss <= 0:
        raise ValueError(f"best validation loss must be positive, got {best_val_loss}")
    return 100.0 * (val_loss / best_val_loss - 1.0)


# ---------------------------------------------------------------------------
# batching helpers


def _epoch_batches(n: int, batch_size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _take(samples: list[Sample], idx: np.ndarray) -> list[Sample]:
    return [samples[int(i)] for i in idx]


# ---------------------------------------------------------------------------
# CAM pre-training


def pretrain_cam(model: CaptionModel, train: list[Sample], cfg: TrainConfig,
                 rng: np.random.Generator) -> list[float]:
    """Train the collision head with binary cross-entropy, then freeze it."""
    opt = Adam(model.store.tensors("cam."), lr=cfg.cam_lr,
               beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    losses = []
    for _ in range(cfg.cam_epochs):
        epoch_loss = 0.0
        batches = _epoch_batches(len(train), cfg.batch_size, rng)
        for idx in batches:
            batch = collate(_take(train, idx), dtype=model.config.dtype)
            opt.zero_grad()
            loss = _cam_loss(model, batch)
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        losses.append(epoch_loss / len(train))
    model.store.freeze("cam.")
    return losses


def _cam_loss(model: CaptionModel, batch: Batch) -> Tensor:
    from . import features as feat
    store = model.store
    dtype = model.config.dtype
    # same forward as cam_forward but keeping the logit for a stable BCE
    dest = ad.constant(batch.dest, dtype=dtype)
    targ = ad.constant(batch.targ, dtype=dtype)
    regions = ad.constant(batch.regions, dtype=dtype)
    logit, _ = feat.cam_collision_logit(store, dest, targ, regions,
                                        batch.region_mask)
    return ad.bce_with_logits(logit, batch.labels)


def cam_accuracy(model: CaptionModel, samples: list[Sample],
                 batch_size: int = 64) -> float:
    hits = 0
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i:i + batch_size], dtype=model.config.dtype)
            p, _ = model.cam_forward(batch)
            pred = p.data >= 0.5
            hits += int((pred == (batch.labels >= 0.5)).sum())
    return hits / len(samples)


# ---------------------------------------------------------------------------
# main training loop


@dataclass
class TrainResult:
    model: CaptionModel
    records: list[EpochRecord]
    cam_losses: list[float]
    att_train: np.ndarray
    att_val: np.ndarray


def evaluate_loss(model: CaptionModel, samples: list[Sample], att: np.ndarray,
                  cfg: TrainConfig) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(samples), cfg.batch_size):
            chunk = samples[i:i + cfg.batch_size]
            batch = collate(chunk, dtype=model.config.dtype)
            result = model.forward(batch, att[i:i + cfg.batch_size])
            loss, _, _ = loss_total(result.output, batch.target_ids,
                                    result.pooled_image, result.pooled_text, cfg)
            total += loss.item() * len(chunk)
    return total / len(samples)


def train_captioner(dataset: Dataset, cfg: TrainConfig,
                    model_config: ModelConfig | None = None,
                    no_cam: bool = False) -> TrainResult:
    """Two-stage training; deterministic for a fixed config and seed."""
    train = dataset["train"]
    val = dataset["val"]
    if not train or not val:
        raise ValueError("train_captioner: need non-empty train and val splits")

    mcfg = model_config or ModelConfig(vocab_size=len(dataset.vocab))
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    cam_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    model = CaptionModel(mcfg, init_rng)

    cam_losses: list[float] = []
    if no_cam:
        model.store.freeze("cam.")
    else:
        cam_losses = pretrain_cam(model, train, cfg, cam_rng)
    att_train = model.attention_maps(train, disabled=no_cam)
    att_val = model.attention_maps(val, disabled=no_cam)

    trainable = {k: v for k, v in model.store.items() if v.requires_grad}
    opt = Adam(trainable, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps)

    records: list[EpochRecord] = []
    best_val = float("inf")
    for epoch in range(1, cfg.max_epochs + 1):
        epoch_loss = 0.0
        epoch_ce = 0.0
        seen = 0
        for step, idx in enumerate(_epoch_batches(len(train), cfg.batch_size,
                                                  batch_rng)):
            chunk = _take(train, idx)
            batch = collate(chunk, dtype=mcfg.dtype)
            opt.zero_grad()
            result = model.forward(batch, att_train[idx])
            loss, ce, _ = loss_total(result.output, batch.target_ids,
                                     result.pooled_image, result.pooled_text, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"training diverged: loss={value} at epoch {epoch}, "
                    f"step {step}")
            loss.backward()
            opt.step()
            epoch_loss += value * len(idx)
            epoch_ce += ce * len(idx)
            seen += len(idx)

        val_loss = evaluate_loss(model, val, att_val, cfg)
        best_val = min(best_val, val_loss)
        gl = generalization_loss(val_loss, best_val)
        stop = gl > cfg.gl_threshold
        records.append(EpochRecord(
            epoch=epoch, train_loss=epoch_loss / seen, train_ce=epoch_ce / seen,
            val_loss=val_loss, best_val_loss=best_val, gl=gl, stopped=stop))
        if stop:
            break

    return TrainResult(model=model, records=records, cam_losses=cam_losses,
                       att_train=att_train, att_val=att_val)


def save_log(records: list[EpochRecord], path: str | Path) -> None:
    header = {"magic": LOG_MAGIC, "version": LOG_VERSION, "epochs": len(records)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
