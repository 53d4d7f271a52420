"""Black-box signature extraction and bit error rate."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .encoding import EncodingScheme, Signature, decode_labels
from .engine import Model, predict


class VerificationError(RuntimeError):
    pass


class PredictionProvider(Protocol):
    """Anything that answers label queries for a batch of images."""

    def predict(self, images: np.ndarray) -> np.ndarray: ...


class LocalModel:
    """Serves predictions from an in-process checkpoint."""

    def __init__(self, model: Model):
        self._model = model
        self.queries = 0

    def predict(self, images):
        self.queries += len(images)
        return predict(self._model, images)


def as_provider(obj) -> PredictionProvider:
    return LocalModel(obj) if isinstance(obj, Model) else obj


def ber(bits, recovered) -> float:
    a, b = np.asarray(bits), np.asarray(recovered)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"bit strings differ in length ({a.shape} vs {b.shape})")
    if a.size == 0:
        raise ValueError("empty bit strings")
    return float((a != b).sum() / a.size)


@dataclass
class EvalReport:
    ber: float
    recovered: list
    detected: bool
    query_count: int
    seconds: float
    test_accuracy: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path, **fields) -> None:
        doc = self.to_dict()
        doc.update(fields)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def extract(model_or_provider, keys, scheme: EncodingScheme, signature: Signature,
            test_data=None) -> EvalReport:
    """Query with the key images, decode the predicted classes, compare bits.

    Only the provider's ``predict`` is used.  ``test_data`` (optional) adds a
    clean accuracy figure through the same interface.
    """
    if keys.stage != "final":
        raise VerificationError("extraction needs the final key set")
    if keys.scheme_sha256 and keys.scheme_sha256 != scheme.sha256():
        raise VerificationError("key set was built for a different encoding scheme")
    if len(keys) != len(signature):
        raise VerificationError(f"{len(keys)} keys for a {len(signature)}-bit signature")
    provider = as_provider(model_or_provider)
    start = time.perf_counter()
    order = np.argsort(keys.bit_index, kind="stable")
    labels = np.asarray(provider.predict(keys.images[order]))
    recovered = decode_labels(labels, scheme)
    seconds = time.perf_counter() - start
    rate = ber(signature.as_array(), recovered)
    acc = None
    if test_data is not None:
        acc = float((np.asarray(provider.predict(test_data.images)) == test_data.labels).mean())
    return EvalReport(rate, recovered.tolist(), rate == 0.0, len(keys), seconds, acc)
