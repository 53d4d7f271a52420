"""Removal attacks, integrity checks and adversarial-robustness measurement.

Every attack re-runs extraction with the owner's original key set, scheme
and signature (bundled in :class:`Owner`).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .encoding import EncodingScheme, Signature
from .engine import (CrossEntropy, Dense, Model, OptimizerConfig, Topology, TrainingError,
                     accuracy, predict, train)
from .extraction import EvalReport, extract
from .keygen import AttackConfig, WMKeySet, fgsm, momentum_iterative
from .pipeline import Watermark, WatermarkSettings, derive_seed, watermark

log = logging.getLogger(__name__)


class AttackError(RuntimeError):
    pass


@dataclass
class Owner:
    """The owner's secret verification material."""

    keys: WMKeySet
    scheme: EncodingScheme
    signature: Signature

    def __post_init__(self):
        self._fingerprint = (self.keys.sha256(), self.scheme.sha256(), str(self.signature))

    def verify(self, model, test_data: Optional[Dataset] = None) -> EvalReport:
        if (self.keys.sha256(), self.scheme.sha256(), str(self.signature)) != self._fingerprint:
            raise AttackError("owner artifacts were modified")
        return extract(model, self.keys, self.scheme, self.signature, test_data)


@dataclass
class AttackOutcome:
    model: Model
    test_accuracy: float
    report: EvalReport
    descriptor: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"attack": self.descriptor, "test_accuracy": self.test_accuracy,
                "owner_report": self.report.to_dict()}


def _finetune(model, data, cfg, mask=None):
    try:
        return train(model, data, cfg, CrossEntropy(), mask=mask)[0]
    except TrainingError as exc:
        raise AttackError(str(exc)) from exc


def attack_finetune(marked: Model, train_data: Dataset, epochs: int, seed: int, owner: Owner,
                    optimizer: OptimizerConfig, test_data: Dataset,
                    lr_factor: float = 0.1) -> AttackOutcome:
    """Plain cross-entropy retraining of the marked model."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    cfg = optimizer.replace(learning_rate=optimizer.learning_rate * lr_factor, epochs=epochs, seed=seed)
    attacked = _finetune(marked, train_data, cfg)
    return AttackOutcome(attacked, accuracy(attacked, test_data.images, test_data.labels),
                         owner.verify(attacked),
                         {"kind": "finetune", "epochs": epochs, "lr": cfg.learning_rate, "seed": seed})


@dataclass
class PruneConfig:
    alpha: float
    epochs: int = 5
    lr_factor: float = 0.1
    seed: int = 0
    global_threshold: bool = False

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")


def prune_weights(model: Model, alpha: float, global_threshold: bool = False):
    """Zero the ``alpha`` fraction of smallest-magnitude weights (biases kept).

    Layer-wise by default.  An output unit left with no incoming weights gets its
    largest-magnitude weight back.  Returns ``(pruned, mask, warnings)``
    where ``mask`` flags the zeroed parameter coordinates.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    mask = np.zeros(model.params.size, dtype=bool)
    slices = model.topology.dense_slices()
    groups = [np.arange(w.start, w.stop) for _, w, _ in slices]
    if global_threshold:
        groups = [np.concatenate(groups)]
    for coords in groups:
        n = int(np.floor(alpha * coords.size))
        order = np.argsort(np.abs(model.params[coords]), kind="stable")
        mask[coords[order[:n]]] = True

    warnings = []
    for i, w, _ in slices:
        layer = model.topology.layers[i]
        cols = mask[w].reshape(layer.in_dim, layer.out_dim)
        dead = np.flatnonzero(cols.all(axis=0))
        if len(dead):
            W = np.abs(model.params[w].reshape(layer.in_dim, layer.out_dim))
            for u in dead:
                cols[np.argmax(W[:, u]), u] = False
            mask[w] = cols.ravel()
            warnings.append(f"layer {i}: kept one weight for {len(dead)} fully pruned output units")
    pruned = model.copy()
    pruned.params[mask] = 0.0
    for msg in warnings:
        log.warning(msg)
    return pruned, mask, warnings


def attack_prune(marked: Model, cfg: PruneConfig, train_data: Dataset, owner: Owner,
                 optimizer: OptimizerConfig, test_data: Dataset) -> AttackOutcome:
    """Magnitude pruning followed by sparse fine-tuning with the mask pinned."""
    pruned, mask, warnings = prune_weights(marked, cfg.alpha, cfg.global_threshold)
    if cfg.alpha > 0 and cfg.epochs > 0:
        ft = optimizer.replace(learning_rate=optimizer.learning_rate * cfg.lr_factor,
                               epochs=cfg.epochs, seed=cfg.seed)
        pruned = _finetune(pruned, train_data, ft, mask=mask)
    return AttackOutcome(pruned, accuracy(pruned, test_data.images, test_data.labels),
                         owner.verify(pruned),
                         {"kind": "prune", "alpha": cfg.alpha, "epochs": cfg.epochs,
                          "global": cfg.global_threshold, "sparsity": float(mask.mean()),
                          "warnings": warnings})


@dataclass
class OverwriteOutcome(AttackOutcome):
    attacker: Optional[Watermark] = None
    attacker_report: Optional[EvalReport] = None

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["attacker_report"] = self.attacker_report.to_dict() if self.attacker_report else None
        return d


def attack_overwrite(marked: Model, train_data: Dataset, signature_len: int, seed: int,
                     owner: Owner, optimizer: OptimizerConfig, settings: WatermarkSettings,
                     test_data: Dataset) -> OverwriteOutcome:
    """Embed a second, attacker-owned watermark with the same method and fresh secrets."""
    if owner.keys.attack.get("seed") == derive_seed(seed, "keygen"):
        raise ValueError("attacker seed collides with the owner's key-generation seed")
    attacker_sig = Signature.random(signature_len, derive_seed(seed, "signature"))
    wm = watermark(marked, train_data, attacker_sig, optimizer, settings, seed, test_data)
    attacked = wm.marked
    mine = extract(attacked, wm.keys, wm.scheme, attacker_sig)
    return OverwriteOutcome(attacked, accuracy(attacked, test_data.images, test_data.labels),
                            owner.verify(attacked),
                            {"kind": "overwrite", "attacker_k": signature_len, "seed": seed},
                            wm, mine)


# ---------------------------------------------------------------------------
# Integrity
# ---------------------------------------------------------------------------


def zoo_topologies(reference: Topology) -> list:
    """Three different-topology siblings: half width, double width, one layer deeper."""
    hidden = reference.hidden or [reference.input_dim]
    half = [max(2, h // 2) for h in hidden]
    double = [2 * h for h in hidden]
    deeper = hidden + [hidden[-1]]
    return [Topology.mlp(reference.input_dim, h, reference.num_classes) for h in (half, double, deeper)]


def build_zoo(train_data: Dataset, reference: Topology, optimizer: OptimizerConfig, seed: int,
              same: int = 3) -> list:
    """Independently trained unmarked models as ``(name, model)`` pairs."""
    zoo = []
    tops = [("same", reference)] * same + [("different", t) for t in zoo_topologies(reference)]
    for i, (kind, topo) in enumerate(tops):
        s = derive_seed(seed, f"zoo{i}")
        model, _ = train(Model.init(topo, s), train_data, optimizer.replace(seed=s), CrossEntropy())
        zoo.append((f"M{i + 1}-{kind}", model))
    return zoo


@dataclass
class IntegrityResult:
    names: list
    reports: list
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"models": [{"name": n, **r.to_dict()} for n, r in zip(self.names, self.reports)],
                "violations": self.violations, "passed": self.passed}


def integrity_suite(owner: Owner, zoo: list, reference: Topology) -> IntegrityResult:
    """Extract the owner's signature from each unmarked model; BER 0 is a violation."""
    same = sum(1 for _, m in zoo if m.topology == reference)
    if same < 3 or len(zoo) - same < 3:
        raise ValueError(f"zoo needs >= 3 same-topology and >= 3 other models, got {same}/{len(zoo) - same}")
    names, reports, violations = [], [], []
    for name, model in zoo:
        r = owner.verify(model)
        names.append(name)
        reports.append(r)
        if r.ber == 0:
            violations.append(name)
    return IntegrityResult(names, reports, violations)


# ---------------------------------------------------------------------------
# Adversarial robustness
# ---------------------------------------------------------------------------


def adversarial_set(model: Model, data: Dataset, attack: str, cfg: AttackConfig) -> np.ndarray:
    if attack == "fgsm_untargeted":
        return fgsm(model, data.images, data.labels, cfg.epsilon)
    if attack == "mim_targeted":
        rng = np.random.default_rng([cfg.seed, 0x616476])
        shift = rng.integers(1, data.num_classes, size=len(data))
        targets = (data.labels + shift) % data.num_classes
        return momentum_iterative(model, data.images, targets, cfg, targeted=True)
    raise ValueError(f"unknown attack {attack!r}")


def adv_robustness(model: Model, test_data: Dataset, attack: str, cfg: AttackConfig) -> float:
    """Accuracy on adversarial versions of ``test_data`` crafted against ``model``.

    Targets for the targeted attack are drawn uniformly among the wrong
    classes from ``cfg.seed``.
    """
    adv = adversarial_set(model, test_data, attack, cfg)
    return float((predict(model, adv) == test_data.labels).mean())


def write_sweep(path, rows: list) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
