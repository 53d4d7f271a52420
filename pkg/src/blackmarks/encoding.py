"""Class-to-bit encoding built by clustering per-class mean logits."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, stratified_sample
from .engine import DimensionError, Model, forward


class SchemeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Signature:
    bits: tuple
    seed: Optional[int] = None

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) < 1:
            raise ValueError("signature needs at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise ValueError("signature bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def random(cls, length: int, seed: int) -> "Signature":
        if length < 1:
            raise ValueError("signature length must be >= 1")
        rng = np.random.default_rng(seed)
        return cls(tuple(rng.integers(0, 2, size=length).tolist()), seed)

    @classmethod
    def from_string(cls, text: str) -> "Signature":
        return cls(tuple(int(ch) for ch in text.strip()))

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join(map(str, self.bits))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.int64)


@dataclass(frozen=True)
class EncodingScheme:
    num_classes: int
    class_to_bit: tuple
    centroids: np.ndarray
    base: int = 2
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        mapping = tuple(int(b) for b in self.class_to_bit)
        if len(mapping) != self.num_classes:
            raise SchemeError("class_to_bit must assign every class")
        for b in range(self.base):
            if b not in mapping:
                raise SchemeError(f"cluster {b} is empty")
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if not np.all(np.isfinite(centroids)):
            raise SchemeError("non-finite centroid")
        object.__setattr__(self, "class_to_bit", mapping)
        object.__setattr__(self, "centroids", centroids)

    @property
    def table(self) -> np.ndarray:
        return np.asarray(self.class_to_bit, dtype=np.int64)

    def cluster(self, bit: int) -> np.ndarray:
        return np.flatnonzero(self.table == bit)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "base": self.base,
            "class_to_bit": list(self.class_to_bit),
            "centroids": self.centroids.tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingScheme":
        return cls(d["num_classes"], tuple(d["class_to_bit"]), np.asarray(d["centroids"]),
                   d.get("base", 2), d.get("provenance", {}))

    def sha256(self) -> str:
        # Provenance excluded: two schemes that decode identically are the same key.
        core = {"num_classes": self.num_classes, "base": self.base,
                "class_to_bit": list(self.class_to_bit)}
        return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()

    def save(self, path, extra: Optional[dict] = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EncodingScheme":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def inertia(points, assignments, centroids) -> float:
    points = np.asarray(points, dtype=np.float64)
    return float(((points - np.asarray(centroids)[assignments]) ** 2).sum())


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a chosen centroid
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _lloyd(points, centroids, max_iter, tol, trace):
    assign = np.argmin(_sq_dists(points, centroids), axis=1)
    for _ in range(max_iter):
        trace.append(inertia(points, assign, centroids))
        new = centroids.copy()
        for j in range(len(centroids)):
            members = points[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        assign = np.argmin(_sq_dists(points, centroids), axis=1)
        if shift < tol:
            break
    trace.append(inertia(points, assign, centroids))
    return assign, centroids


def _hartigan(points, assign, centroids, trace):
    """Single-point transfers that lower the inertia, counting the centroid moves.

    Every transfer-stable partition is also a Lloyd fixed point, so this only
    escapes the poorer Lloyd optima.
    """
    assign = assign.copy()
    k = len(centroids)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    centroids = np.array([points[assign == j].mean(axis=0) if counts[j] else centroids[j] for j in range(k)])
    moved = True
    while moved:
        moved = False
        for i, x in enumerate(points):
            a = assign[i]
            if counts[a] < 2:
                continue
            d2 = ((centroids - x) ** 2).sum(axis=1)
            gain = counts / (counts + 1) * d2
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if gain[b] < counts[a] / (counts[a] - 1) * d2[a] - 1e-12:
                centroids[a] = (centroids[a] * counts[a] - x) / (counts[a] - 1)
                centroids[b] = (centroids[b] * counts[b] + x) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                assign[i] = b
                moved = True
        if moved:
            centroids = np.array([points[assign == j].mean(axis=0) for j in range(k)])
            trace.append(inertia(points, assign, centroids))
    return assign, centroids


def kmeans(points, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6,
           n_init: int = 30, trace: Optional[list] = None):
    """Lloyd's algorithm from k-means++ seeding (Euclidean distance).

    Each of the ``n_init`` seedings is refined by single-point transfers and
    the lowest inertia wins.  Returns
    ``(assignments, centroids)``.  If ``trace`` is a list, it receives the
    inertia after every assignment step of the returned run.  A cluster that
    empties keeps its previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be between 1 and the number of points ({n})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run_trace: list = []
        assign, centroids = _lloyd(points, kmeans_pp_init(points, k, rng), max_iter, tol, run_trace)
        if np.bincount(assign, minlength=k).min() > 0:
            assign, centroids = _hartigan(points, assign, centroids, run_trace)
        if best is None or run_trace[-1] < best[2][-1]:
            best = (assign, centroids, run_trace)
    if trace is not None:
        trace.extend(best[2])
    return best[0], best[1]


# ---------------------------------------------------------------------------
# Scheme design / decode
# ---------------------------------------------------------------------------


def class_mean_logits(model: Model, data: Dataset) -> np.ndarray:
    logits = forward(model, data.images).astype(np.float64)
    return np.stack([logits[data.labels == c].mean(axis=0) for c in range(data.num_classes)])


def design_scheme(model: Model, train_data: Dataset, per_class: int = 100, seed: int = 0,
                  max_retries: int = 10) -> EncodingScheme:
    """Split the classes in two by 2-means over their mean output activations.

    The cluster holding class 0 becomes bit 0.
    """
    subset = stratified_sample(train_data, per_class, seed)
    means = class_mean_logits(model, subset)
    for attempt in range(max_retries + 1):
        assign, centroids = kmeans(means, 2, seed + attempt)
        if len(np.unique(assign)) == 2:
            break
    else:
        raise SchemeError(f"2-means left a cluster empty after {max_retries} retries")
    if assign[0] != 0:
        assign = 1 - assign
        centroids = centroids[::-1]
    provenance = {"model_sha256": model.sha256(), "per_class": per_class, "seed": seed}
    return EncodingScheme(train_data.num_classes, tuple(assign.tolist()), centroids, 2, provenance)


def decode(logits, scheme: EncodingScheme) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] != scheme.num_classes:
        raise DimensionError(f"logits have shape {logits.shape}, scheme has {scheme.num_classes} classes")
    return scheme.table[np.argmax(logits, axis=1)]


def decode_labels(labels, scheme: EncodingScheme) -> np.ndarray:
    return scheme.table[np.asarray(labels, dtype=np.int64)]


def entropy(length: int, base: int = 2) -> float:
    """Information carried by a base-``base`` signature of ``length`` digits."""
    if length < 1 or base < 2:
        raise ValueError("need length >= 1 and base >= 2")
    return length * math.log2(base)
