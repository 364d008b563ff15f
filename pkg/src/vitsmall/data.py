"""Datasets: CIFAR binary records, synthetic fixtures, raw-tensor import, normalization."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import stream
from .tensor import ParameterError


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    train_size: int
    test_size: int
    image_size: int
    num_classes: int


# record counts and geometry of the supported benchmarks
DATASETS = {
    "cifar10": DatasetSpec("cifar10", 50_000, 10_000, 32, 10),
    "cifar100": DatasetSpec("cifar100", 50_000, 10_000, 32, 100),
    "cinic10": DatasetSpec("cinic10", 90_000, 90_000, 32, 10),
    "svhn": DatasetSpec("svhn", 73_257, 26_032, 32, 10),
    "tiny-imagenet": DatasetSpec("tiny-imagenet", 100_000, 10_000, 64, 200),
}


@dataclass
class Sample:
    image: np.ndarray
    label: int
    id: int


@dataclass
class ImageDataset:
    """Images (N, H, W, 3) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if len(self.images) != len(self.labels):
            raise DataFormatError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"label outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), int(self.ids[i]))

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, indices) -> "ImageDataset":
        idx = np.asarray(indices)
        return replace(self, images=self.images[idx], labels=self.labels[idx], ids=self.ids[idx])

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.images.reshape(-1, self.images.shape[-1]).astype(np.float64)
        return x.mean(axis=0), x.std(axis=0)


@dataclass
class Splits:
    train: ImageDataset
    test: ImageDataset
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        # statistics come from the training split
        if self.mean is None or self.std is None:
            self.mean, self.std = self.train.channel_stats()
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


def stratified_subset(ds: ImageDataset, n: int, seed: int) -> ImageDataset:
    """Fixed class-balanced subset of ``n`` samples (round-robin over classes)."""
    rng = stream(seed, "subset", ds.name)
    per_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.num_classes)]
    chosen, depth = [], 0
    while len(chosen) < n:
        added = False
        for idx in per_class:
            if depth < len(idx) and len(chosen) < n:
                chosen.append(idx[depth])
                added = True
        if not added:
            break
        depth += 1
    return ds.subset(np.sort(np.array(chosen, dtype=np.int64)))


# ---------------------------------------------------------------- normalization

def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0):
        raise ParameterError("normalize: std contains zeros")
    out = (images - np.asarray(mean)) / std
    return out.astype(images.dtype if images.dtype in (np.float32, np.float64) else np.float32)


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    out = images * np.asarray(std) + np.asarray(mean)
    return out.astype(images.dtype)


# ---------------------------------------------------------------- CIFAR

CIFAR_PIXELS = 32 * 32 * 3


def decode_cifar_records(buf: bytes, label_bytes: int = 1, num_classes: int = 10,
                         label_index: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Parse CIFAR binary records into (N, 32, 32, 3) float32 in [0, 1] and labels.

    Each record is ``label_bytes`` label bytes followed by the R, G and B
    planes, each 32x32 row-major. ``label_index`` picks which label byte
    to use (the last one by default, i.e. the fine label for CIFAR-100).
    """
    rec = label_bytes + CIFAR_PIXELS
    if len(buf) % rec:
        raise DataFormatError(f"file length {len(buf)} is not a multiple of the record size {rec}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    li = label_bytes - 1 if label_index is None else label_index
    labels = raw[:, li].astype(np.int64)
    if len(labels) and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DataFormatError(f"corrupt record {bad}: label {labels[bad]} >= {num_classes}")
    pixels = raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels.astype(np.float32) / np.float32(255.0), labels


def encode_cifar_records(images_u8: np.ndarray, labels, coarse_labels=None) -> bytes:
    """Inverse of :func:`decode_cifar_records` for uint8 (N, 32, 32, 3) images."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    planes = images_u8.transpose(0, 3, 1, 2).reshape(len(images_u8), -1)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse_labels is not None:
        cols.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    return np.concatenate(cols + [planes], axis=1).tobytes()


def _read_files(paths, label_bytes, num_classes, name):
    images, labels = [], []
    for p in paths:
        x, y = decode_cifar_records(Path(p).read_bytes(), label_bytes, num_classes)
        images.append(x)
        labels.append(y)
    return ImageDataset(np.concatenate(images), np.concatenate(labels), num_classes, name)


def _check_counts(splits: Splits, spec: DatasetSpec, strict: bool) -> None:
    if strict and (len(splits.train) != spec.train_size or len(splits.test) != spec.test_size):
        raise DataFormatError(
            f"{spec.name}: loaded {len(splits.train)}/{len(splits.test)} records, "
            f"expected {spec.train_size}/{spec.test_size}")


def _locate(path: Path, names: list[str]) -> Path:
    for cand in (path, *path.glob("*")):
        if cand.is_dir() and all((cand / n).exists() for n in names):
            return cand
    raise FileNotFoundError(f"could not find {names} under {path}")


def load_cifar10(path, strict: bool = True) -> Splits:
    """Read ``data_batch_{1..5}.bin`` and ``test_batch.bin`` (the binary release)."""
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    root = _locate(Path(path), names)
    train = _read_files([root / n for n in names[:5]], 1, 10, "cifar10")
    test = _read_files([root / "test_batch.bin"], 1, 10, "cifar10-test")
    splits = Splits(train, test)
    _check_counts(splits, DATASETS["cifar10"], strict)
    return splits


def load_cifar100(path, strict: bool = True) -> Splits:
    """Read ``train.bin`` / ``test.bin``; each record carries coarse + fine label bytes."""
    root = _locate(Path(path), ["train.bin", "test.bin"])
    train = _read_files([root / "train.bin"], 2, 100, "cifar100")
    test = _read_files([root / "test.bin"], 2, 100, "cifar100-test")
    splits = Splits(train, test)
    _check_counts(splits, DATASETS["cifar100"], strict)
    return splits


# ---------------------------------------------------------------- raw tensors

RAW_MAGIC = b"SVTR"


def save_raw(path, ds: ImageDataset) -> None:
    """Raw-tensor import format: a fixed header, u32 labels, f32 pixels.

    Header: magic ``SVTR``, then u32 version(=1), n, height, width,
    channels, num_classes (little-endian).
    """
    n, h, w, c = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<6I", 1, n, h, w, c, ds.num_classes))
        fh.write(np.asarray(ds.labels, dtype="<u4").tobytes())
        fh.write(np.asarray(ds.images, dtype="<f4").tobytes())


def load_raw(path, name: str | None = None) -> ImageDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != RAW_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    version, n, h, w, c, k = struct.unpack("<6I", buf[4:28])
    if version != 1:
        raise DataFormatError(f"{path}: unsupported raw version {version}")
    expected = 28 + 4 * n + 4 * n * h * w * c
    if len(buf) != expected:
        raise DataFormatError(f"{path}: size {len(buf)} != {expected}")
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=28).astype(np.int64)
    images = np.frombuffer(buf, dtype="<f4", offset=28 + 4 * n).reshape(n, h, w, c).astype(np.float32)
    if not np.isfinite(images).all():
        raise DataFormatError(f"{path}: non-finite pixels")
    return ImageDataset(images, labels, k, name or Path(path).stem)


# ---------------------------------------------------------------- synthetic

_SHAPES = ("hstripes", "vstripes", "diag", "checker", "disc", "ring", "cross", "square", "triangle", "dots")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u, v = yy / size, xx / size
    r = np.hypot(u - 0.5, v - 0.5)
    period = 4 if size >= 16 else 2
    if kind == "hstripes":
        m = (yy // (period / 2)) % 2 == 0
    elif kind == "vstripes":
        m = (xx // (period / 2)) % 2 == 0
    elif kind == "diag":
        m = ((yy + xx) // period) % 2 == 0
    elif kind == "checker":
        m = ((yy // period) + (xx // period)) % 2 == 0
    elif kind == "disc":
        m = r < 0.35
    elif kind == "ring":
        m = (r > 0.22) & (r < 0.42)
    elif kind == "cross":
        m = (np.abs(u - 0.5) < 0.12) | (np.abs(v - 0.5) < 0.12)
    elif kind == "square":
        m = (np.abs(u - 0.5) < 0.3) & (np.abs(v - 0.5) < 0.3)
    elif kind == "triangle":
        m = (u > 0.2) & (u < 0.85) & (np.abs(v - 0.5) < (u - 0.2) * 0.7)
    else:
        m = (((yy // period) % 2 == 0) & ((xx // period) % 2 == 0))
    return m.astype(np.float64)


def _class_color(c: int, k: int) -> np.ndarray:
    hue = (c * 0.618033988749895) % 1.0
    h6 = hue * 6
    x = 1 - abs(h6 % 2 - 1)
    rgb = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][int(h6) % 6]
    return 0.15 + 0.8 * np.array(rgb)


def class_prototype(c: int, k: int, size: int) -> np.ndarray:
    """Colored pattern of class ``c`` on a mid-gray background, (size, size, 3)."""
    mask = _shape_mask(_SHAPES[c % len(_SHAPES)], size)[..., None]
    return 0.5 * (1 - mask) + mask * _class_color(c, k)


def synthetic_dataset(seed: int, n_per_class: int, k: int, size: int = 32, noise: float = 0.05,
                      n_test_per_class: int | None = None) -> Splits:
    """Class prototypes plus Gaussian pixel noise; deterministic per seed."""
    protos = np.stack([class_prototype(c, k, size) for c in range(k)])
    n_test = n_per_class if n_test_per_class is None else n_test_per_class

    def make(n, key):
        rng = stream(seed, "synthetic", key)
        labels = np.repeat(np.arange(k), n)
        imgs = protos[labels]
        if noise > 0:
            imgs = imgs + rng.normal(0.0, noise, imgs.shape)
        order = rng.permutation(len(labels))
        return ImageDataset(np.clip(imgs[order], 0, 1).astype(np.float32), labels[order], k, f"synthetic-{key}")

    return Splits(make(n_per_class, "train"), make(n_test, "test"))


def quadrant_probes(seed: int, n: int, k: int, size: int = 32, noise: float = 0.05):
    """Images whose class pattern fills one random quadrant on a noisy gray field.

    Returns (images, labels, quadrants); quadrant q is (row, col) = divmod(q, 2).
    """
    rng = stream(seed, "probes")
    half = size // 2
    labels = rng.integers(0, k, n)
    quads = rng.integers(0, 4, n)
    images = np.full((n, size, size, 3), 0.5)
    for i in range(n):
        r, c = divmod(int(quads[i]), 2)
        images[i, r * half:(r + 1) * half, c * half:(c + 1) * half] = class_prototype(int(labels[i]), k, half)
    images += rng.normal(0.0, noise, images.shape)
    return np.clip(images, 0, 1).astype(np.float32), labels.astype(np.int64), quads.astype(np.int64)


def quadrant_dataset(seed: int, n_train: int, n_test: int, k: int, size: int = 32, noise: float = 0.05) -> Splits:
    """Quadrant probes as a labelled train/test split."""
    x, y, _ = quadrant_probes(seed, n_train + n_test, k, size, noise)
    train = ImageDataset(x[:n_train], y[:n_train], k, "quadrant-train")
    test = ImageDataset(x[n_train:], y[n_train:], k, "quadrant-test")
    return Splits(train, test)
