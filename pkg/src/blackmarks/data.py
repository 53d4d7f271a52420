"""Datasets: MNIST IDX files, synthetic Gaussian blobs, stratified subsets."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 2 or len(images) != len(labels):
            raise ValueError("images must be N x D and match labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def _read(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(path: Path, magic: int) -> tuple:
    raw = _read(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise FormatError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, data


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    images_path, labels_path = Path(images_path), Path(labels_path)
    idims, pixels = _parse_idx(images_path, IMAGES_MAGIC)
    ldims, labels = _parse_idx(labels_path, LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise FormatError(
            f"{labels_path}: {ldims[0]} labels but {images_path} holds {idims[0]} images"
        )
    images = pixels.reshape(idims[0], -1).astype(np.float32) / np.float32(255.0)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"{labels_path}: label {labels.max()} >= {num_classes}")
    return Dataset(images, labels.astype(np.int64), num_classes, split)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{directory / stem}[.gz] not found")


def load_mnist(data_dir, split: str = "train") -> Dataset:
    d = Path(data_dir)
    img, lab = MNIST_FILES[split]
    return load_idx(_find(d, img), _find(d, lab), 10, split)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (used by tests and fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def synth_blobs(num_classes: int, per_class: int, dim: int, separation: float,
                seed: int, noise: float = 0.05, split: str = "train") -> Dataset:
    """Isotropic Gaussian blobs around random directions from the cube center.

    Class centers sit at ``0.5 + separation * noise * u_c`` for unit vectors
    ``u_c`` (orthonormal when ``num_classes <= dim``), so ``separation`` is
    roughly the center distance in noise standard deviations.  Values are
    clipped into [0, 1].
    """
    if num_classes < 2 or per_class < 1:
        raise ValueError("need num_classes >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(num_classes, dim))
    if num_classes <= dim:
        u = np.linalg.qr(u.T)[0].T
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    centers = 0.5 + separation * noise * u
    labels = np.repeat(np.arange(num_classes), per_class)
    images = centers[labels] + noise * rng.normal(size=(len(labels), dim))
    perm = rng.permutation(len(labels))
    return Dataset(np.clip(images[perm], 0.0, 1.0), labels[perm], num_classes, split)


def blob_splits(num_classes: int, per_class: int, dim: int, separation: float,
                seed: int, test_fraction: float = 0.25) -> tuple:
    """Train/test split drawn from one blob population."""
    full = synth_blobs(num_classes, per_class, dim, separation, seed)
    n_test = int(round(len(full) * test_fraction))
    train = Dataset(full.images[n_test:], full.labels[n_test:], num_classes, "train")
    test = Dataset(full.images[:n_test], full.labels[:n_test], num_classes, "test")
    return train, test


def load_digits_splits(seed: int = 0, test_fraction: float = 0.3) -> tuple:
    """scikit-learn's bundled 8x8 handwritten digits, scaled into [0, 1].

    Stand-in real-image benchmark when the MNIST files are not available.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    x = bunch.data.astype(np.float32) / np.float32(16.0)
    y = bunch.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    test_idx, train_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    return Dataset(x[train_idx], y[train_idx], 10, "train"), Dataset(x[test_idx], y[test_idx], 10, "test")


def _jitter(images: np.ndarray, side: int, copies: int, rng: np.random.Generator) -> np.ndarray:
    """Random small affine warps (rotation, scale, shift) of square images."""
    from scipy.ndimage import affine_transform

    out = np.empty((len(images) * copies, side * side), dtype=np.float32)
    centre = (side - 1) / 2.0
    k = 0
    for img in images.reshape(-1, side, side):
        for _ in range(copies):
            angle = np.deg2rad(rng.uniform(-12, 12))
            scale = rng.uniform(0.9, 1.1)
            c, s = np.cos(angle) / scale, np.sin(angle) / scale
            mat = np.array([[c, -s], [s, c]])
            shift = rng.uniform(-0.8, 0.8, size=2)
            offset = centre - mat @ (centre + shift)
            warped = affine_transform(img, mat, offset=offset, order=1, mode="constant")
            out[k] = np.clip(warped, 0.0, 1.0).ravel()
            k += 1
    return out


def digits_standin(seed: int = 0, train_copies: int = 16, test_copies: int = 8,
                   test_fraction: float = 0.3) -> tuple:
    """Larger train/test sets grown from the 8x8 digits by small affine jitter.

    Train rows are jittered copies of the train split only and test rows are
    the untouched held-out images plus jittered copies of them, so nothing
    derived from a test image is ever trained on.
    """
    train, test = load_digits_splits(seed, test_fraction)
    rng = np.random.default_rng([seed, 0x6A6974])
    tx = np.concatenate([train.images, _jitter(train.images, 8, train_copies - 1, rng)])
    ty = np.concatenate([train.labels, np.repeat(train.labels, train_copies - 1)])
    vx = np.concatenate([test.images, _jitter(test.images, 8, test_copies - 1, rng)])
    vy = np.concatenate([test.labels, np.repeat(test.labels, test_copies - 1)])
    p, q = rng.permutation(len(ty)), rng.permutation(len(vy))
    return Dataset(tx[p], ty[p], 10, "train"), Dataset(vx[q], vy[q], 10, "test")


def stratified_sample(dataset: Dataset, per_class: int, seed: int) -> Dataset:
    """Exactly ``per_class`` rows of every class, drawn without replacement."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(dataset.num_classes):
        idx = dataset.class_indices(c)
        if len(idx) < per_class:
            raise SamplingError(f"class {c} has {len(idx)} samples, {per_class} requested")
        picked.append(rng.choice(idx, size=per_class, replace=False))
    return dataset.subset(rng.permutation(np.concatenate(picked)))
