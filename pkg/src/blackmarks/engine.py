"""Small dense/ReLU network engine with hand-written backprop.

Parameters live in one flat float32 buffer (weights then bias for every dense
layer, weights row-major with shape ``(in_dim, out_dim)``).  All arithmetic is
done in float64 and rounded back to float32 at the boundaries, which keeps
results reproducible across BLAS builds and makes finite-difference checks
meaningful.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message: str, layer: int):
        super().__init__(f"{message} (layer {layer})")
        self.layer = layer


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    has_bias: bool = True
    kind: str = field(default="dense", init=False)

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + (self.out_dim if self.has_bias else 0)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)
    n_params: int = field(default=0, init=False)


Layer = Union[Dense, ReLU]


@dataclass(frozen=True)
class Topology:
    input_dim: int
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        width = self.input_dim
        last_dense = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_dim != width:
                    raise DimensionError(
                        f"layer {i} expects {layer.in_dim} inputs, previous width is {width}"
                    )
                width = layer.out_dim
                last_dense = layer
            elif not isinstance(layer, ReLU):
                raise ValueError(f"unsupported layer {layer!r}")
        if last_dense is None or width != self.num_classes:
            raise DimensionError("final dense layer must output num_classes")

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], num_classes: int) -> "Topology":
        layers: list = []
        width = input_dim
        for h in hidden:
            layers += [Dense(width, h), ReLU()]
            width = h
        layers.append(Dense(width, num_classes))
        return cls(input_dim, tuple(layers), num_classes)

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def hidden(self) -> list:
        return [l.out_dim for l in self.layers if isinstance(l, Dense)][:-1]

    def dense_slices(self) -> list:
        """(layer index, weight slice, bias slice or None) for each dense layer."""
        out, offset = [], 0
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, Dense):
                continue
            w = slice(offset, offset + layer.in_dim * layer.out_dim)
            offset = w.stop
            b = None
            if layer.has_bias:
                b = slice(offset, offset + layer.out_dim)
                offset = b.stop
            out.append((i, w, b))
        return out

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layers.append({"kind": "dense", "in_dim": layer.in_dim,
                               "out_dim": layer.out_dim, "has_bias": layer.has_bias})
            else:
                layers.append({"kind": "relu"})
        return {"input_dim": self.input_dim, "num_classes": self.num_classes, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        layers = []
        for spec in d["layers"]:
            if spec["kind"] == "dense":
                layers.append(Dense(spec["in_dim"], spec["out_dim"], spec.get("has_bias", True)))
            elif spec["kind"] == "relu":
                layers.append(ReLU())
            else:
                raise ValueError(f"unknown layer kind {spec['kind']!r}")
        return cls(d["input_dim"], tuple(layers), d["num_classes"])


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


@dataclass
class Model:
    topology: Topology
    params: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float32)
        if self.params.shape != (self.topology.n_params,):
            raise DimensionError(
                f"parameter buffer has {self.params.size} values, topology needs "
                f"{self.topology.n_params}"
            )

    @classmethod
    def init(cls, topology: Topology, seed: int) -> "Model":
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = np.zeros(topology.n_params, dtype=np.float32)
        for i, w, b in topology.dense_slices():
            layer = topology.layers[i]
            limit = np.sqrt(6.0 / layer.in_dim)
            params[w] = rng.uniform(-limit, limit, size=w.stop - w.start)
        return cls(topology, params, seed)

    def copy(self) -> "Model":
        return Model(self.topology, self.params.copy(), self.seed)

    def layers(self, params: Optional[np.ndarray] = None) -> list:
        """Views ``(W, b)`` into ``params`` (defaults to own buffer)."""
        p = self.params if params is None else params
        out = []
        for i, w, b in self.topology.dense_slices():
            layer = self.topology.layers[i]
            W = p[w].reshape(layer.in_dim, layer.out_dim)
            out.append((W, None if b is None else p[b]))
        return out

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.topology.to_dict(), sort_keys=True).encode())
        h.update(self.params.astype("<f4").tobytes())
        return h.hexdigest()

    def save(self, directory, meta: Optional[dict] = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        doc = self.topology.to_dict()
        doc["seed"] = int(self.seed)
        if meta:
            doc["meta"] = meta
        (directory / "topology.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        (directory / "weights.bin").write_bytes(self.params.astype("<f4").tobytes())
        return directory

    @classmethod
    def load(cls, directory) -> "Model":
        directory = Path(directory)
        doc = json.loads((directory / "topology.json").read_text())
        topology = Topology.from_dict(doc)
        raw = (directory / "weights.bin").read_bytes()
        params = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        return cls(topology, params, doc.get("seed", 0))


def read_checkpoint_meta(directory) -> dict:
    doc = json.loads((Path(directory) / "topology.json").read_text())
    return doc.get("meta", {})


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Rows fed to a loss.  ``extra`` flags rows that came from the auxiliary
    set (watermark keys); ``bits`` holds their payload bit, -1 elsewhere."""

    x: np.ndarray
    y: np.ndarray
    extra: Optional[np.ndarray] = None
    bits: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.y)
        if self.extra is None:
            self.extra = np.zeros(n, dtype=bool)
        if self.bits is None:
            self.bits = np.full(n, -1, dtype=np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


class CrossEntropy:
    """Mean softmax cross-entropy over every row of the batch."""

    name = "cross_entropy"

    def __call__(self, logits: np.ndarray, batch: Batch):
        n = logits.shape[0]
        logp = log_softmax(logits)
        rows = np.arange(n)
        value = -logp[rows, batch.y].mean()
        grad = np.exp(logp)
        grad[rows, batch.y] -= 1.0
        return float(value), grad / n


class SquaredError:
    """Mean over rows of the summed squared error against a dense target.

    ``batch.y`` is a 2-D target array here, not class indices."""

    name = "squared_error"

    def __call__(self, logits, batch):
        diff = logits - np.asarray(batch.y, dtype=np.float64)
        n = logits.shape[0]
        return float((diff ** 2).sum() / n), 2.0 * diff / n


class Constant:
    """Loss that ignores its input; useful as a frozen surrogate."""

    name = "constant"

    def __init__(self, value: float = 1.0):
        self.value = value

    def __call__(self, logits, batch):
        return float(self.value), np.zeros_like(logits)


LossFn = Callable[[np.ndarray, Batch], tuple]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _check_input(topology: Topology, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != topology.input_dim:
        raise DimensionError(
            f"input has shape {x.shape}, network expects (*, {topology.input_dim})"
        )
    return x


def _forward64(model: Model, params64: np.ndarray, x64: np.ndarray):
    """Returns logits and the list of per-layer inputs needed for backprop."""
    cache = []
    h = x64
    views = iter(model.layers(params64))
    for i, layer in enumerate(model.topology.layers):
        cache.append(h)
        if isinstance(layer, Dense):
            W, b = next(views)
            h = h @ W
            if b is not None:
                h = h + b
        else:
            h = np.maximum(h, 0.0)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite activation", i)
    return h, cache


def _backward64(model: Model, params64: np.ndarray, cache: list, dlogits: np.ndarray,
                want_params: bool = True):
    grad = np.zeros_like(params64) if want_params else None
    slices = model.topology.dense_slices()
    views = model.layers(params64)
    dense_idx = len(slices) - 1
    d = dlogits
    for i in range(len(model.topology.layers) - 1, -1, -1):
        layer = model.topology.layers[i]
        inp = cache[i]
        if isinstance(layer, Dense):
            _, ws, bs = slices[dense_idx]
            W, _ = views[dense_idx]
            if want_params:
                grad[ws] = (inp.T @ d).ravel()
                if bs is not None:
                    grad[bs] = d.sum(axis=0)
            d = d @ W.T
            dense_idx -= 1
        else:
            d = d * (inp > 0)
    return grad, d


def _last_dense_index(topology: Topology) -> int:
    return max(i for i, l in enumerate(topology.layers) if isinstance(l, Dense))


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Pre-softmax logits, shape ``(batch, C)``, float32."""
    x = _check_input(model.topology, x)
    logits, _ = _forward64(model, model.params.astype(np.float64), x.astype(np.float64))
    return logits.astype(np.float32)


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Class predictions; argmax ties go to the lowest class index."""
    return np.argmax(forward(model, x), axis=1)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 4096) -> float:
    correct = 0
    for start in range(0, len(y), batch_size):
        correct += int((predict(model, x[start:start + batch_size]) == y[start:start + batch_size]).sum())
    return correct / len(y)


def loss_and_grad(model: Model, batch: Batch, loss: LossFn,
                  params: Optional[np.ndarray] = None):
    """Float64 loss value and parameter gradient for ``batch``."""
    x = _check_input(model.topology, batch.x).astype(np.float64)
    p64 = (model.params if params is None else params).astype(np.float64)
    logits, cache = _forward64(model, p64, x)
    value, dlogits = loss(logits, batch)
    if not np.isfinite(value):
        raise NumericError("non-finite loss", _last_dense_index(model.topology))
    grad, _ = _backward64(model, p64, cache, dlogits)
    return value, grad


def loss_value(model: Model, batch: Batch, loss: LossFn,
               params: Optional[np.ndarray] = None) -> float:
    """Float64 loss at ``params`` (float64 allowed, for finite differences)."""
    x = _check_input(model.topology, batch.x).astype(np.float64)
    p64 = (model.params if params is None else params).astype(np.float64)
    logits, _ = _forward64(model, p64, x)
    return loss(logits, batch)[0]


def grad_params(model: Model, x: np.ndarray, labels, loss: LossFn) -> np.ndarray:
    _, grad = loss_and_grad(model, Batch(np.asarray(x), np.asarray(labels)), loss)
    with np.errstate(over="ignore"):
        out = grad.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise NumericError("gradient overflows float32", _last_dense_index(model.topology))
    return out


def input_loss_and_grad(model: Model, x: np.ndarray, target) -> tuple:
    """Per-row cross-entropy toward ``target`` and its gradient w.r.t. inputs.

    ``target`` is a class index or one index per row.  The loss is summed over
    rows so each row's gradient is that of its own cross-entropy.
    """
    x = _check_input(model.topology, x).astype(np.float64)
    n = x.shape[0]
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,))
    if np.any(target < 0) or np.any(target >= model.topology.num_classes):
        raise ValueError("target class out of range")
    p64 = model.params.astype(np.float64)
    logits, cache = _forward64(model, p64, x)
    logp = log_softmax(logits)
    rows = np.arange(n)
    losses = -logp[rows, target]
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite loss", _last_dense_index(model.topology))
    d = np.exp(logp)
    d[rows, target] -= 1.0
    _, dx = _backward64(model, p64, cache, d, want_params=False)
    return losses, dx


def grad_input(model: Model, x: np.ndarray, target_class) -> np.ndarray:
    """Gradient of the cross-entropy toward ``target_class`` w.r.t. the input."""
    x = np.asarray(x)
    _, dx = input_loss_and_grad(model, x, target_class)
    return dx.astype(np.float32).reshape(x.shape)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def replace(self, **changes) -> "OptimizerConfig":
        d = dict(self.__dict__)
        d.update(changes)
        return OptimizerConfig(**d)


class _Optimizer:
    def __init__(self, cfg: OptimizerConfig, n: int):
        self.cfg = cfg
        self.t = 0
        self.m = np.zeros(n)
        self.v = np.zeros(n)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        p = params.astype(np.float64)
        if cfg.kind == "sgd":
            if cfg.momentum:
                self.m = cfg.momentum * self.m + grad
                p -= cfg.learning_rate * self.m
            else:
                p -= cfg.learning_rate * grad
        else:
            self.t += 1
            self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
            self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grad * grad
            mhat = self.m / (1 - cfg.beta1 ** self.t)
            vhat = self.v / (1 - cfg.beta2 ** self.t)
            p -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        with np.errstate(over="ignore", invalid="ignore"):
            return p.astype(np.float32)


def _extra_rng_seed(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 0x6B6579])


def train(model: Model, dataset, config: OptimizerConfig, loss: LossFn,
          mask: Optional[np.ndarray] = None, extra=None, extra_ratio: float = 0.1,
          on_epoch: Optional[Callable] = None):
    """Minibatch training; returns ``(new_model, seconds)``.

    ``dataset`` needs ``images`` and ``labels``.  ``mask`` marks parameters
    that are pinned at exactly zero (pruned).  ``extra`` is an optional second
    set (``images``, ``labels``, ``bits``) mixed into every batch at
    ``extra_ratio`` extra rows per clean row on average, cycling through a
    reshuffled order.  Rows are dealt from a running quota, so ratios below
    ``1 / batch_size`` leave some batches without extra rows.  ``on_epoch(epoch, model, mean_loss)`` runs after each epoch.
    """
    x, y = np.asarray(dataset.images), np.asarray(dataset.labels)
    if len(y) == 0:
        raise ValueError("empty dataset")
    n_extra = 0 if extra is None else len(extra.labels)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != model.params.shape:
            raise DimensionError("mask is not aligned with the parameter buffer")

    start = time.perf_counter()
    out = model.copy()
    if mask is not None:
        out.params[mask] = 0.0
    opt = _Optimizer(config, out.params.size)
    rng = np.random.default_rng(config.seed)
    extra_rng = np.random.default_rng(_extra_rng_seed(config.seed))
    extra_order = extra_rng.permutation(n_extra) if n_extra else None
    extra_pos = 0
    bs = config.batch_size
    ratio = extra_ratio if n_extra else 0.0
    clean_seen = dealt = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        total, batches = 0.0, 0
        for bi, s in enumerate(range(0, len(y), bs)):
            idx = order[s:s + bs]
            bx, by = x[idx], y[idx]
            flag = bits = None
            clean_seen += len(idx)
            per_batch = int(np.floor(clean_seen * ratio + 1e-9)) - dealt
            dealt += per_batch
            if per_batch:
                take = []
                for _ in range(per_batch):
                    if extra_pos == n_extra:
                        extra_order = extra_rng.permutation(n_extra)
                        extra_pos = 0
                    take.append(extra_order[extra_pos])
                    extra_pos += 1
                take = np.asarray(take)
                bx = np.concatenate([bx, np.asarray(extra.images)[take]])
                by = np.concatenate([by, np.asarray(extra.labels)[take]])
                flag = np.r_[np.zeros(len(idx), bool), np.ones(len(take), bool)]
                bits = np.r_[np.full(len(idx), -1), np.asarray(extra.bits)[take]]
            try:
                value, grad = loss_and_grad(out, Batch(bx, by, flag, bits), loss)
            except NumericError as exc:
                raise TrainingError(f"loss diverged ({exc})", epoch, bi) from exc
            if mask is not None:
                grad[mask] = 0.0
            out.params = opt.step(out.params, grad)
            if mask is not None:
                out.params[mask] = 0.0
            if not np.all(np.isfinite(out.params)):
                raise TrainingError("parameters became non-finite", epoch, bi)
            total += value
            batches += 1
        log.debug("epoch %d loss %.5f", epoch, total / batches)
        if on_epoch is not None:
            on_epoch(epoch, out, total / batches)
    return out, time.perf_counter() - start
