"""MNIST / CIFAR-10 parsing, preprocessing and one-vs-rest splits."""

from __future__ import annotations

import gzip
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConsistencyError, DataIOError, FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CANONICAL_SIZE = 32

GCN_SCALE = 1.0
GCN_EPS = 1e-8

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass(frozen=True)
class RawImage:
    pixels: np.ndarray  # (C, H, W) uint8
    class_id: int


class RawImageSet:
    """Parsed records held as one uint8 block plus a label vector.

    Behaves like a read-only sequence of :class:`RawImage`.
    """

    def __init__(self, pixels: np.ndarray, labels: np.ndarray):
        pixels = np.asarray(pixels)
        labels = np.asarray(labels, dtype=np.int64)
        if pixels.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) pixels, got {pixels.shape}")
        if len(pixels) != len(labels):
            raise ConsistencyError(f"{len(pixels)} images but {len(labels)} labels")
        self.pixels = pixels
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> RawImage:
        return RawImage(self.pixels[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, index) -> "RawImageSet":
        return RawImageSet(self.pixels[index], self.labels[index])


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, 32, 32) float32 in [0, 1]
    class_ids: np.ndarray  # (N,) int64
    normal_flags: np.ndarray | None = None  # (N,) bool, test splits only

    def __post_init__(self):
        n = len(self.images)
        if len(self.class_ids) != n or (self.normal_flags is not None and len(self.normal_flags) != n):
            raise ConsistencyError("images, class_ids and normal_flags must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, index) -> "ImageDataset":
        flags = None if self.normal_flags is None else self.normal_flags[index]
        return ImageDataset(self.images[index], self.class_ids[index], flags)


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ArgumentError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


# --- parsing -----------------------------------------------------------------


def read_bytes(path) -> bytes:
    """File contents, transparently gunzipped when the 0x1F 0x8B prefix is present."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if blob[:2] == b"\x1f\x8b":
        try:
            blob = gzip.decompress(blob)
        except (OSError, EOFError) as exc:
            raise DataIOError(f"corrupt gzip stream in {path}: {exc}") from exc
    return blob


def _idx_header(blob: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(blob) < need:
        raise DataIOError(f"{path}: truncated IDX header")
    header = np.frombuffer(blob[:need], dtype=">u4")
    if int(header[0]) != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{int(header[0]):08x}, expected 0x{magic:08x}")
    return tuple(int(v) for v in header[1:])


def read_idx_images(path) -> np.ndarray:
    blob = read_bytes(path)
    count, rows, cols = _idx_header(blob, IDX_IMAGES_MAGIC, 3, path)
    payload = count * rows * cols
    if len(blob) - 16 < payload:
        raise DataIOError(f"{path}: truncated, expected {payload} pixel bytes, found {len(blob) - 16}")
    return np.frombuffer(blob, dtype=np.uint8, count=payload, offset=16).reshape(count, 1, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    blob = read_bytes(path)
    (count,) = _idx_header(blob, IDX_LABELS_MAGIC, 1, path)
    if len(blob) - 8 < count:
        raise DataIOError(f"{path}: truncated, expected {count} labels, found {len(blob) - 8}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_mnist(images_path, labels_path) -> RawImageSet:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ConsistencyError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    return RawImageSet(images, labels)


def load_cifar10(batch_paths) -> RawImageSet:
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    pixels, labels = [], []
    for path in batch_paths:
        blob = read_bytes(path)
        if len(blob) == 0 or len(blob) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(blob)} is not a positive multiple of {CIFAR_RECORD}")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = records[:, 0].astype(np.int64)
        if lab.max() > 9:
            raise FormatError(f"{path}: label byte {int(lab.max())} outside 0..9")
        pixels.append(records[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    if not pixels:
        raise ArgumentError("no CIFAR-10 batch files given")
    return RawImageSet(np.concatenate(pixels), np.concatenate(labels))


def load_image_file(path, labels_path=None) -> RawImageSet:
    """Parse either an IDX image file or a CIFAR-10 batch, sniffing the format."""
    blob = read_bytes(path)
    if len(blob) >= 4 and int(np.frombuffer(blob[:4], dtype=">u4")[0]) == IDX_IMAGES_MAGIC:
        images = read_idx_images(path)
        if labels_path is None:
            return RawImageSet(images, np.full(len(images), -1))
        labels = read_idx_labels(labels_path)
        if len(labels) != len(images):
            raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
        return RawImageSet(images, labels)
    return load_cifar10([path])


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataIOError(f"missing data file {name}(.gz) in {data_dir}")


def dataset_files(dataset: str, data_dir) -> dict[str, list[Path]]:
    """Locate the train/test files of ``dataset`` under ``data_dir``."""
    data_dir = Path(data_dir)
    if dataset == "mnist":
        return {
            "train": [_resolve(data_dir, MNIST_FILES["train_images"]), _resolve(data_dir, MNIST_FILES["train_labels"])],
            "test": [_resolve(data_dir, MNIST_FILES["test_images"]), _resolve(data_dir, MNIST_FILES["test_labels"])],
        }
    if dataset == "cifar10":
        sub = data_dir / "cifar-10-batches-bin"
        root = sub if sub.is_dir() else data_dir
        return {
            "train": [_resolve(root, f) for f in CIFAR_TRAIN_FILES],
            "test": [_resolve(root, f) for f in CIFAR_TEST_FILES],
        }
    raise ArgumentError(f"unknown dataset {dataset!r}")


def load_dataset(dataset: str, data_dir) -> tuple[RawImageSet, RawImageSet]:
    files = dataset_files(dataset, data_dir)
    if dataset == "mnist":
        return load_mnist(*files["train"]), load_mnist(*files["test"])
    return load_cifar10(files["train"]), load_cifar10(files["test"])


# --- preprocessing -----------------------------------------------------------


def canonicalize(raw) -> np.ndarray:
    """Zero-pad 1x28x28 images to 1x32x32; pass 3x32x32 through; cast to float.

    Accepts a :class:`RawImage`, a single (C, H, W) array or a (N, C, H, W)
    stack.
    """
    pixels = raw.pixels if isinstance(raw, RawImage) else np.asarray(raw)
    shape = pixels.shape[-3:]
    if pixels.ndim not in (3, 4):
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got {pixels.shape}")
    if shape == (1, 28, 28):
        pad = [(0, 0)] * (pixels.ndim - 2) + [(2, 2), (2, 2)]
        return np.pad(pixels.astype(np.float64), pad)
    if shape == (3, 32, 32):
        return pixels.astype(np.float64)
    raise ShapeError(f"unsupported image shape {shape}")


def global_contrast_normalize(image, scale: float = GCN_SCALE, eps: float = GCN_EPS) -> np.ndarray:
    """L1 global contrast normalisation, per image over all its pixels.

    For a stack (leading batch axis with ndim == 4) every image is normalised
    on its own.
    """
    x = np.asarray(image, dtype=np.float64)
    axes = tuple(range(1, x.ndim)) if x.ndim == 4 else None
    mean = x.mean(axis=axes, keepdims=axes is not None)
    centered = x - mean
    dev = np.abs(centered).mean(axis=axes, keepdims=axes is not None)
    return scale * centered / np.maximum(eps, dev)


def minmax_scale(images) -> np.ndarray:
    """Per-image (x - min) / (max - min); constant images become all zeros.

    Accepts an :class:`ImageDataset` (returning a new dataset), a (N, ...)
    stack or a single image; arrays of ndim < 4 are treated as one image.
    """
    if isinstance(images, ImageDataset):
        return ImageDataset(
            minmax_scale(images.images).astype(images.images.dtype),
            images.class_ids,
            images.normal_flags,
        )
    x = np.asarray(images, dtype=np.float64)
    if x.size == 0:
        raise ArgumentError("minmax_scale needs a nonempty input")
    axes = tuple(range(1, x.ndim)) if x.ndim == 4 else None
    lo = x.min(axis=axes, keepdims=axes is not None)
    hi = x.max(axis=axes, keepdims=axes is not None)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def preprocess(raw_pixels: np.ndarray) -> np.ndarray:
    """canonicalize -> GCN -> min-max on a (N, C, H, W) uint8 stack; float32 out."""
    out = np.empty((len(raw_pixels), raw_pixels.shape[1], CANONICAL_SIZE, CANONICAL_SIZE), np.float32)
    step = 4096
    for start in range(0, len(raw_pixels), step):
        chunk = canonicalize(raw_pixels[start : start + step])
        out[start : start + step] = minmax_scale(global_contrast_normalize(chunk))
    return out


def one_vs_rest_split(
    all_train: RawImageSet,
    all_test: RawImageSet,
    normal_class: int,
    cfg: SplitConfig = SplitConfig(),
    test_subset_size: int | None = None,
    preprocessed: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[ImageDataset, ImageDataset, ImageDataset]:
    """Train/validation from the normal class of ``all_train``; full labelled test set.

    ``preprocessed`` may carry already-preprocessed (train, test) stacks in
    record order, which skips recomputation.
    """
    normal_idx = np.flatnonzero(all_train.labels == normal_class)
    if len(normal_idx) == 0:
        raise ArgumentError(f"normal class {normal_class} absent from training labels")
    rng = np.random.default_rng(cfg.seed)
    order = normal_idx[rng.permutation(len(normal_idx))]
    n_train = int(round(cfg.train_fraction * len(order)))
    n_train = min(max(n_train, 1), len(order))
    train_idx, val_idx = np.sort(order[:n_train]), np.sort(order[n_train:])

    test_idx = np.arange(len(all_test))
    if test_subset_size is not None and test_subset_size < len(all_test):
        test_idx = np.sort(rng.choice(len(all_test), size=test_subset_size, replace=False))

    if preprocessed is None:
        tr_pix = preprocess(all_train.pixels[np.concatenate([train_idx, val_idx])])
        tr_x, va_x = tr_pix[: len(train_idx)], tr_pix[len(train_idx) :]
        te_x = preprocess(all_test.pixels[test_idx])
    else:
        tr_x, va_x = preprocessed[0][train_idx], preprocessed[0][val_idx]
        te_x = preprocessed[1][test_idx]

    test_labels = all_test.labels[test_idx]
    return (
        ImageDataset(tr_x, all_train.labels[train_idx]),
        ImageDataset(va_x, all_train.labels[val_idx]),
        ImageDataset(te_x, test_labels, test_labels == normal_class),
    )


def save_prepared(path, train: RawImageSet, test: RawImageSet) -> None:
    """Cache preprocessed train/test stacks with their labels."""
    np.savez(
        path,
        train_images=preprocess(train.pixels),
        train_labels=train.labels,
        test_images=preprocess(test.pixels),
        test_labels=test.labels,
    )


def load_prepared(path) -> dict[str, np.ndarray]:
    with np.load(path) as f:
        return {k: f[k] for k in f.files}
