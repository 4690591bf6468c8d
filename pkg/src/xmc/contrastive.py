"""InfoNCE loss, the FIFO negative-key queue, and contrastive pre-training.

The trainable radar branch is pulled toward its paired image key and pushed
away from a queue of past image keys; the frozen vision branch provides the
keys and never receives gradients. The queue decouples the negative count K
from the batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import Dataset, heatmap_inputs, image_inputs
from .errors import ConfigError, ContractError, NumericError, UsageError
from .models import EncoderModel, cosine_lr, init_encoder, make_optimizer, sgd_step
from .seeding import derive_seed, rng_for

UNIT_NORM_TOL = 1e-6


class NegativeQueue:
    """Fixed-capacity FIFO ring of key vectors.

    With ``unit_check`` (the default) every inserted key must be unit-norm;
    the raw-score mutual-information critic runs with the check disabled.
    """

    def __init__(self, capacity: int, unit_check: bool = True):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.unit_check = unit_check
        self._buf: np.ndarray | None = None
        self._count = 0

    def __len__(self) -> int:
        return min(self._count, self.capacity)

    @property
    def full(self) -> bool:
        return len(self) == self.capacity

    def enqueue(self, keys: np.ndarray) -> None:
        """Insert a (B, D) block of keys, evicting the B oldest when full."""
        keys = np.asarray(keys, dtype=np.float64)
        if keys.ndim != 2:
            raise UsageError(f"enqueue expects a (B, D) block, got shape {keys.shape}")
        if len(keys) > self.capacity:
            raise UsageError(
                f"cannot enqueue {len(keys)} keys into a queue of capacity {self.capacity}")
        if self.unit_check:
            norms = np.sqrt((keys * keys).sum(axis=1))
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ContractError("queue keys must be unit-norm")
        if self._buf is None:
            self._buf = np.zeros((self.capacity, keys.shape[1]))
        elif self._buf.shape[1] != keys.shape[1]:
            raise UsageError(
                f"key dim {keys.shape[1]} does not match queue dim {self._buf.shape[1]}")
        for row in keys:
            self._buf[self._count % self.capacity] = row
            self._count += 1

    def snapshot(self) -> np.ndarray:
        """Current entries, oldest first."""
        if self._buf is None:
            return np.zeros((0, 0))
        if self._count <= self.capacity:
            return self._buf[:self._count].copy()
        p = self._count % self.capacity
        return np.vstack([self._buf[p:], self._buf[:p]])


def info_nce(q: Tensor, k_plus: Tensor | np.ndarray, queue: NegativeQueue,
             tau: float, check_unit: bool = True) -> Tensor:
    """Mean contrastive loss over the batch.

    Per row: -log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.ki-/tau)) ),
    evaluated as a stabilized logsumexp over the (K+1)-way scores. Gradients
    reach q only; the positive keys and the queue are treated as constants.
    """
    if tau <= 0.0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if len(queue) == 0:
        raise UsageError("info_nce needs a non-empty negative queue")
    k = k_plus.data if isinstance(k_plus, Tensor) else np.asarray(k_plus, dtype=np.float64)
    if q.data.ndim != 2 or k.shape != q.shape:
        raise UsageError(f"q {q.shape} and k_plus {k.shape} must be equal (B, D) shapes")
    negatives = queue.snapshot()
    if negatives.shape[1] != q.shape[1]:
        raise UsageError(
            f"queue dim {negatives.shape[1]} does not match embedding dim {q.shape[1]}")
    if check_unit:
        for name, block in (("q", q.data), ("k_plus", k), ("queue", negatives)):
            norms = np.sqrt((block * block).sum(axis=1))
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ContractError(f"info_nce: {name} rows are not unit-norm")

    pos = ad.row_sum(ad.mul(q, Tensor(k)))                      # (B,)
    neg = ad.matmul(q, Tensor(negatives.T))                     # (B, K)
    logits = ad.scale(ad.concat_cols(ad.reshape(pos, (q.shape[0], 1)), neg), 1.0 / tau)
    return ad.mean_all(ad.sub(ad.logsumexp_row(logits), ad.scale(pos, 1.0 / tau)))


@dataclass(frozen=True)
class ContrastiveConfig:
    """Hyper-parameters of contrastive pre-training."""

    tau: float = 0.07
    queue_size: int = 256
    batch_size: int = 64
    epochs: int = 200
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    embed_dim: int = 128
    normalize: bool = True

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.queue_size < self.batch_size:
            raise ConfigError(
                f"queue size {self.queue_size} must be >= batch size {self.batch_size}")
        if min(self.batch_size, self.epochs, self.embed_dim) < 1:
            raise ConfigError("batch_size, epochs and embed_dim must be positive")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    uniform_ref: float  # ln(K+1), the no-information score level


@dataclass
class PretrainResult:
    encoder: EncoderModel
    history: list[EpochStats] = field(default_factory=list)


def encode_keys(vision: EncoderModel, images_flat: np.ndarray,
                normalize: bool = True, batch: int = 256) -> np.ndarray:
    """Vision-branch keys for a stack of flattened images, without recording
    any graph. The vision branch is frozen, so keys are computed once."""
    out = np.empty((len(images_flat), vision.embed_dim))
    for start in range(0, len(images_flat), batch):
        block = vision.forward_numpy(images_flat[start:start + batch])
        if normalize:
            norms = np.sqrt((block * block).sum(axis=1, keepdims=True))
            block = block / np.maximum(norms, ad.NORM_EPS)
        out[start:start + batch] = block
    return out


def pretrain(dataset: Dataset, vision: EncoderModel,
             cfg: ContrastiveConfig) -> PretrainResult:
    """Label-free contrastive pre-training of the radar encoder.

    Per epoch: shuffle the contrastive split; per batch: encode and
    normalize queries, compute InfoNCE against the paired keys and the
    queue, step SGD under a cosine schedule, then enqueue the batch keys.
    The queue is warm-started with encoded keys before the first step.
    """
    if not vision.frozen:
        raise ContractError("the vision encoder must be frozen before pre-training")
    idx = dataset.contrastive_idx
    if len(idx) < cfg.queue_size:
        raise ConfigError(
            f"contrastive split ({len(idx)}) smaller than the queue ({cfg.queue_size})")

    heat = heatmap_inputs(dataset.heatmaps[idx])
    keys = encode_keys(vision, image_inputs(dataset.images[idx]), cfg.normalize)
    if vision.embed_dim != cfg.embed_dim:
        raise ConfigError(
            f"vision embed dim {vision.embed_dim} != configured {cfg.embed_dim}")

    radio = init_encoder([heat.shape[1], *cfg.hidden, cfg.embed_dim],
                         derive_seed(cfg.seed, "radio"))
    params = radio.parameters()
    opt = make_optimizer(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    queue = NegativeQueue(cfg.queue_size, unit_check=cfg.normalize)

    n = len(idx)
    order_rng = rng_for(cfg.seed, "batch-order")
    first_order = order_rng.permutation(n)

    # Warm start: fill the queue from the first ceil(K/B) batches of epoch 0
    # so the first losses are measured against a full complement of negatives.
    warm_batches = math.ceil(cfg.queue_size / cfg.batch_size)
    for b in range(warm_batches):
        sel = first_order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        queue.enqueue(keys[sel])

    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = first_order if epoch == 0 else order_rng.permutation(n)
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            q = radio.forward(Tensor(heat[sel]))
            if cfg.normalize:
                q = ad.l2_normalize(q)
            loss = info_nce(q, keys[sel], queue, cfg.tau, check_unit=cfg.normalize)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite contrastive loss at epoch {epoch}, sample {start}")
            ad.zero_grads(params)
            ad.backward(loss)
            sgd_step(params, opt, lr=lr)
            queue.enqueue(keys[sel])
            total += value * len(sel)
        history.append(EpochStats(epoch, lr, total / n,
                                  math.log(cfg.queue_size + 1)))
    return PretrainResult(encoder=radio, history=history)
