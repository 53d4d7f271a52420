"""Signature embedding by fine-tuning under cross-entropy plus a cluster loss.

Decoding a prediction only looks at which cluster the argmax class falls in,
so the trainable stand-in for the bitwise Hamming distance is the negative
log of the softmax mass the model puts on the key's cluster.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .encoding import EncodingScheme, decode
from .engine import (Batch, CrossEntropy, Model, OptimizerConfig, TrainingError, forward,
                     log_softmax, train)
from .keygen import WMKeySet

log = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    pass


def _logsumexp(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, z, -np.inf)
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def cluster_mass_loss(logits: np.ndarray, bits: np.ndarray, scheme: EncodingScheme):
    """Per-row ``-log P(argmax lands in cluster bits[i])`` and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.int64)
    in_cluster = scheme.table[None, :] == bits[:, None]
    all_cls = np.ones_like(in_cluster)
    losses = _logsumexp(logits, all_cls) - _logsumexp(logits, in_cluster)
    p = np.exp(log_softmax(logits))
    mass = np.where(in_cluster, p, 0.0).sum(axis=1, keepdims=True)
    grad = p - np.where(in_cluster, p / mass, 0.0)
    return losses, grad


def wm_loss(logits, key_bits, scheme: EncodingScheme) -> float:
    """Mean cluster-mass cross-entropy over key rows; 0 for an empty batch."""
    logits = np.asarray(logits)
    if len(logits) == 0:
        return 0.0
    losses, _ = cluster_mass_loss(logits, key_bits, scheme)
    return float(losses.mean())


def hamming(logits, key_bits, scheme: EncodingScheme) -> int:
    return int((decode(logits, scheme) != np.asarray(key_bits)).sum())


class RegularizedLoss:
    """Cross-entropy on every row plus ``lam`` times the cluster loss on key rows."""

    name = "regularized"

    def __init__(self, scheme: EncodingScheme, lam: float = 0.5):
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.scheme = scheme
        self.lam = lam
        self._ce = CrossEntropy()

    def __call__(self, logits: np.ndarray, batch: Batch):
        value, grad = self._ce(logits, batch)
        keys = np.flatnonzero(batch.extra)
        if len(keys) and self.lam:
            losses, g = cluster_mass_loss(logits[keys], batch.bits[keys], self.scheme)
            value += self.lam * float(losses.mean())
            grad[keys] += self.lam * g / len(keys)
        return value, grad


@dataclass
class EmbedConfig:
    lam: float = 0.5
    epochs: int = 15
    lr_factor: float = 0.1
    train_fraction: float = 1.0
    key_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")

    def optimizer(self, base: OptimizerConfig) -> OptimizerConfig:
        return base.replace(learning_rate=base.learning_rate * self.lr_factor,
                            epochs=self.epochs, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbedResult:
    model: Model
    seconds: float
    history: list

    def report(self, config: EmbedConfig) -> dict:
        return {"epochs": self.history, "seconds": self.seconds, "config": config.to_dict()}


def embed(model: Model, train_data: Dataset, keys: Optional[WMKeySet], cfg: EmbedConfig,
          scheme: EncodingScheme, base_optimizer: OptimizerConfig,
          test_data: Optional[Dataset] = None, monitor: bool = True) -> EmbedResult:
    """Fine-tune ``model`` so each key lands in its bit's cluster.

    Keys are mixed into every clean batch (``cfg.key_ratio`` key rows per
    clean row) and trained both toward their source label and toward their
    cluster.  ``seconds`` covers the optimisation only, not monitoring.
    """
    if keys is not None and keys.stage != "candidate":
        raise ValueError("embed expects candidate-stage keys")
    if keys is not None and keys.scheme_sha256 and keys.scheme_sha256 != scheme.sha256():
        raise EmbeddingError("keys were generated for a different encoding scheme")
    data = train_data
    if cfg.train_fraction < 1:
        rng = np.random.default_rng([cfg.seed, 0x737562])
        n = int(round(len(train_data) * cfg.train_fraction))
        data = train_data.subset(np.sort(rng.choice(len(train_data), n, replace=False)))

    history: list = []
    monitor_time = [0.0]

    def on_epoch(epoch, current, mean_loss):
        if not monitor:
            return
        t0 = time.perf_counter()
        row = {"epoch": epoch + 1, "loss": mean_loss}
        if keys is not None and len(keys):
            logits = forward(current, keys.images)
            row["wm_loss"] = wm_loss(logits, keys.bits, scheme)
            row["hamming"] = hamming(logits, keys.bits, scheme)
        if test_data is not None:
            logits = forward(current, test_data.images)
            ce, _ = CrossEntropy()(logits.astype(np.float64), Batch(test_data.images, test_data.labels))
            row["clean_loss"] = ce
            row["test_accuracy"] = float((np.argmax(logits, axis=1) == test_data.labels).mean())
        history.append(row)
        log.info("embed epoch %s", row)
        monitor_time[0] += time.perf_counter() - t0

    extra = keys if keys is not None and len(keys) else None
    try:
        marked, seconds = train(model, data, cfg.optimizer(base_optimizer), RegularizedLoss(scheme, cfg.lam),
                                extra=extra, extra_ratio=cfg.key_ratio, on_epoch=on_epoch)
    except TrainingError as exc:
        raise EmbeddingError(str(exc)) from exc
    return EmbedResult(marked, seconds - monitor_time[0], history)
