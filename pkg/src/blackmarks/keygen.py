"""Watermark key generation.

Candidates are targeted momentum-iterative adversarial images whose source
class encodes one signature bit and whose target class lies in the opposite
cluster.  After embedding, candidates are filtered down to those the marked
model gets right and every unmarked variant gets wrong.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .encoding import EncodingScheme, SchemeError, Signature
from .engine import CrossEntropy, Model, OptimizerConfig, input_loss_and_grad, predict, train

log = logging.getLogger(__name__)


class KeyGenError(RuntimeError):
    def __init__(self, message: str, bit_indices: Sequence[int] = ()):
        super().__init__(message)
        self.bit_indices = list(bit_indices)


@dataclass
class AttackConfig:
    epsilon: float = 0.5
    iterations: int = 10
    step_size: Optional[float] = None  # defaults to epsilon / iterations
    decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is None:
            self.step_size = self.epsilon / self.iterations
        if self.step_size < 0 or (self.epsilon > 0 and self.step_size == 0):
            raise ValueError("step_size must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def momentum_iterative(model: Model, images: np.ndarray, classes, cfg: AttackConfig,
                       targeted: bool = True) -> np.ndarray:
    """Momentum iterative sign-gradient attack on a batch of images.

    Targeted: descend the cross-entropy toward ``classes``.  Untargeted:
    ascend the cross-entropy of the true ``classes``.  The gradient of each
    row is L1-normalised before entering the momentum buffer (rows with norm
    below 1e-12 are used as-is), and every iterate is clipped to the
    ``epsilon`` L-inf ball around the original image and to [0, 1].
    """
    base = np.asarray(images, dtype=np.float32)
    squeeze = base.ndim == 1
    base = np.atleast_2d(base)
    x0 = base.astype(np.float64)
    lo = np.maximum(x0 - cfg.epsilon, 0.0)
    hi = np.minimum(x0 + cfg.epsilon, 1.0)
    x = x0.copy()
    g = np.zeros_like(x)
    direction = -1.0 if targeted else 1.0
    for _ in range(cfg.iterations):
        _, grad = input_loss_and_grad(model, x, classes)
        norm = np.abs(grad).sum(axis=1, keepdims=True)
        grad = np.where(norm >= 1e-12, grad / np.where(norm >= 1e-12, norm, 1.0), grad)
        g = cfg.decay * g + grad
        x = np.clip(x + direction * cfg.step_size * np.sign(g), lo, hi)
    out = np.clip(x, lo, hi).astype(np.float32)
    # float32 rounding can land one ulp outside the ball; step back toward the original
    over = np.abs(out.astype(np.float64) - x0) > cfg.epsilon
    while over.any():
        out[over] = np.nextafter(out[over], base[over])
        over = np.abs(out.astype(np.float64) - x0) > cfg.epsilon
    return out[0] if squeeze else out


def mim_targeted(model: Model, image: np.ndarray, target_class, cfg: AttackConfig) -> np.ndarray:
    return momentum_iterative(model, image, target_class, cfg, targeted=True)


def fgsm(model: Model, images: np.ndarray, labels, epsilon: float) -> np.ndarray:
    """Untargeted single-step fast gradient sign attack."""
    cfg = AttackConfig(epsilon=epsilon, iterations=1, step_size=epsilon, decay=0.0)
    return momentum_iterative(model, images, labels, cfg, targeted=False)


# ---------------------------------------------------------------------------
# Key sets
# ---------------------------------------------------------------------------


@dataclass
class WMKey:
    image: np.ndarray
    label: int
    target_class: int
    bit_index: int
    bit_value: int
    base_index: int


@dataclass
class WMKeySet:
    images: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    bit_index: np.ndarray
    bit_value: np.ndarray
    base_index: np.ndarray
    signature: Signature
    stage: str = "candidate"
    oversample: int = 10
    attack: dict = field(default_factory=dict)
    scheme_sha256: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        for name in ("labels", "targets", "bit_index", "bit_value", "base_index"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if self.stage not in ("candidate", "final"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "final" and not np.array_equal(self.bit_index, np.arange(len(self.signature))):
            raise ValueError("final key set must hold one key per bit, in bit order")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> WMKey:
        return WMKey(self.images[i], int(self.labels[i]), int(self.targets[i]),
                     int(self.bit_index[i]), int(self.bit_value[i]), int(self.base_index[i]))

    @property
    def bits(self) -> np.ndarray:
        return self.bit_value

    def subset(self, idx, stage: Optional[str] = None) -> "WMKeySet":
        idx = np.asarray(idx, dtype=np.int64)
        return WMKeySet(self.images[idx], self.labels[idx], self.targets[idx], self.bit_index[idx],
                        self.bit_value[idx], self.base_index[idx], self.signature,
                        stage or self.stage, self.oversample, dict(self.attack), self.scheme_sha256)

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self._meta(), sort_keys=True).encode())
        h.update(self.images.astype("<f4").tobytes())
        return h.hexdigest()

    def _meta(self) -> dict:
        return {
            "signature": str(self.signature),
            "signature_seed": self.signature.seed,
            "stage": self.stage,
            "oversample": self.oversample,
            "attack": self.attack,
            "scheme_sha256": self.scheme_sha256,
            "dim": int(self.images.shape[1]),
            "keys": [
                {"bit_index": int(b), "bit_value": int(v), "label": int(l),
                 "target_class": int(t), "base_index": int(s)}
                for b, v, l, t, s in zip(self.bit_index, self.bit_value, self.labels,
                                         self.targets, self.base_index)
            ],
        }

    def save(self, directory, stem: str = "keys", extra: Optional[dict] = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = self._meta()
        if extra:
            meta.update(extra)
        (directory / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        (directory / f"{stem}.bin").write_bytes(self.images.astype("<f4").tobytes())

    @classmethod
    def load(cls, directory, stem: str = "keys") -> "WMKeySet":
        directory = Path(directory)
        meta = json.loads((directory / f"{stem}.json").read_text())
        images = np.frombuffer((directory / f"{stem}.bin").read_bytes(), dtype="<f4")
        images = images.reshape(len(meta["keys"]), meta["dim"]).astype(np.float32)
        col = lambda k: [key[k] for key in meta["keys"]]  # noqa: E731
        signature = Signature.from_string(meta["signature"])
        signature = Signature(signature.bits, meta.get("signature_seed"))
        return cls(images, col("label"), col("target_class"), col("bit_index"), col("bit_value"),
                   col("base_index"), signature, meta["stage"], meta["oversample"],
                   meta["attack"], meta["scheme_sha256"])


def generate_candidates(model: Model, scheme: EncodingScheme, signature: Signature,
                        train_data: Dataset, cfg: AttackConfig, oversample: int = 10) -> WMKeySet:
    """``oversample`` targeted adversarial candidates per signature bit.

    Each bit index gets its own generator seeded from ``(cfg.seed, bit)`` so
    bits can be generated independently.
    """
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    clusters = [scheme.cluster(0), scheme.cluster(1)]
    if any(len(c) == 0 for c in clusters):
        raise SchemeError("encoding scheme has an empty cluster")
    by_class = [train_data.class_indices(c) for c in range(train_data.num_classes)]

    sources, targets, bases, bit_index, bit_value = [], [], [], [], []
    for k, bit in enumerate(signature.bits):
        rng = np.random.default_rng([cfg.seed, k])
        for _ in range(oversample):
            src = int(rng.choice(clusters[bit]))
            tgt = int(rng.choice(clusters[1 - bit]))
            pool = by_class[src]
            if len(pool) == 0:
                raise SchemeError(f"no training images of class {src}")
            sources.append(src)
            targets.append(tgt)
            bases.append(int(pool[rng.integers(len(pool))]))
            bit_index.append(k)
            bit_value.append(bit)

    images = momentum_iterative(model, train_data.images[bases], np.asarray(targets), cfg, targeted=True)
    return WMKeySet(images, sources, targets, bit_index, bit_value, bases, signature,
                    "candidate", oversample, cfg.to_dict(), scheme.sha256())


@dataclass
class FilterResult:
    marked_correct: np.ndarray
    unmarked_wrong: np.ndarray
    survivors: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("marked_correct", "unmarked_wrong", "survivors")}


def make_variants(unmarked: Model, train_data: Dataset, config: OptimizerConfig,
                  count: int, seed: int) -> list:
    """Fine-tuned copies of ``unmarked`` (plain cross-entropy, distinct seeds)."""
    out = []
    for t in range(count):
        cfg = config.replace(seed=int(np.random.SeedSequence([seed, t]).generate_state(1)[0]))
        variant, _ = train(unmarked, train_data, cfg, CrossEntropy())
        out.append(variant)
    return out


def filter_keys(candidates: WMKeySet, marked: Model, unmarked: Model, train_data: Optional[Dataset] = None,
                num_variants: int = 3, variant_config: Optional[OptimizerConfig] = None,
                final_k: Optional[int] = None, seed: int = 0,
                variants: Optional[list] = None) -> tuple:
    """Keep candidates that only the marked model classifies as their label.

    Returns ``(final WMKeySet, FilterResult)``.  ``variants`` may be passed in
    pre-built; otherwise ``num_variants`` are fine-tuned from ``unmarked``.
    """
    if candidates.stage != "candidate":
        raise ValueError("filter_keys needs a candidate-stage key set")
    final_k = len(candidates.signature) if final_k is None else final_k
    if variants is None:
        if num_variants and (train_data is None or variant_config is None):
            raise ValueError("train_data and variant_config are needed to build variants")
        variants = make_variants(unmarked, train_data, variant_config, num_variants, seed) if num_variants else []

    marked_ok = predict(marked, candidates.images) == candidates.labels
    wrong = np.ones(len(candidates), dtype=bool)
    for m in [unmarked, *variants]:
        wrong &= predict(m, candidates.images) != candidates.labels
    result = FilterResult(np.flatnonzero(marked_ok), np.flatnonzero(wrong),
                          np.flatnonzero(marked_ok & wrong))

    rng = np.random.default_rng([seed, 0x66696C])
    chosen, starved = [], []
    for k in range(final_k):
        pool = result.survivors[candidates.bit_index[result.survivors] == k]
        if len(pool) == 0:
            starved.append(k)
            continue
        chosen.append(int(rng.choice(pool)))
    if starved:
        raise KeyGenError(f"no surviving candidate for bit indices {starved}", starved)
    log.info("key filter: %d marked-correct, %d unmarked-wrong, %d survivors",
             len(result.marked_correct), len(result.unmarked_wrong), len(result.survivors))
    return candidates.subset(chosen, stage="final"), result
