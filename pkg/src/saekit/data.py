"""Datasets: CIFAR-10 binary batches, a raw tensor directory format, synthetic blobs.

Images are float32 arrays shaped N×3×H×W with values in [0, 1] before
normalization.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

DATA_MAGIC = b"SAEDATA1"
_HEADER = struct.Struct("<8sQQQQ")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    class_count: int
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError(
                f"dataset {self.name!r}: images {self.images.shape} vs {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            bad = int(np.flatnonzero((self.labels < 0) | (self.labels >= self.class_count))[0])
            raise FormatError(
                f"dataset {self.name!r}: label {self.labels[bad]} at sample {bad} "
                f"outside [0, {self.class_count})"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels, self.class_count, self.name)


# ---------------------------------------------------------------------------
# CIFAR-10


def load_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Decode one binary batch file: 1 label byte + 3072 channel-planar pixel bytes per record."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: missing CIFAR-10 batch file")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        offset = raw.size - raw.size % CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {offset}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(
            f"{path}: label {labels[bad[0]]} > 9 at byte offset {int(bad[0]) * CIFAR_RECORD}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    parts = [load_cifar10_batch(directory / f) for f in CIFAR_TRAIN_FILES]
    train = Dataset(
        np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10, "cifar10-train"
    )
    test_images, test_labels = load_cifar10_batch(directory / CIFAR_TEST_FILE)
    return train, Dataset(test_images, test_labels, 10, "cifar10-test")


def write_cifar10_batch(path, images_u8: np.ndarray, labels) -> None:
    """Write records in the CIFAR-10 binary layout (used for fixtures)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# raw tensor directory: images.f32le (header + float32 data) and labels.u32le


def save_dataset_dir(directory, ds: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.images.shape
    header = _HEADER.pack(DATA_MAGIC, n, c, h, w)
    (directory / "images.f32le").write_bytes(header + ds.images.astype("<f4").tobytes())
    (directory / "labels.u32le").write_bytes(ds.labels.astype("<u4").tobytes())


def load_dataset_dir(directory, class_count: int | None = None) -> Dataset:
    directory = Path(directory)
    img_path, lab_path = directory / "images.f32le", directory / "labels.u32le"
    for p in (img_path, lab_path):
        if not p.is_file():
            raise FormatError(f"{p}: missing dataset file")
    buf = img_path.read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{img_path}: truncated header at byte offset {len(buf)}")
    magic, n, c, h, w = _HEADER.unpack_from(buf)
    if magic != DATA_MAGIC:
        raise FormatError(f"{img_path}: bad magic")
    expected = _HEADER.size + 4 * n * c * h * w
    if len(buf) != expected:
        raise FormatError(f"{img_path}: expected {expected} bytes, file ends at byte offset {len(buf)}")
    images = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(n, c, h, w).astype(np.float32)
    labels = np.fromfile(lab_path, dtype="<u4").astype(np.int64)
    if len(labels) != n:
        raise FormatError(f"{lab_path}: {len(labels)} labels for {n} images")
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 1
    return Dataset(images, labels, class_count, directory.name)


def load_dataset(path, class_count: int | None = None) -> tuple[Dataset, Dataset | None]:
    """Open a CIFAR-10 binary directory or a raw tensor directory."""
    path = Path(path)
    if not path.is_dir():
        raise FormatError(f"{path}: dataset directory not found")
    if (path / CIFAR_TRAIN_FILES[0]).exists():
        return load_cifar10(path)
    return load_dataset_dir(path, class_count), None


# ---------------------------------------------------------------------------
# transforms


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo).astype(np.float64)


def resize_bilinear(images: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers (corners not aligned)."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ConfigError(f"resize target must be at least 1×1, got {target}")
    x = np.asarray(images, dtype=np.float64)
    h, w = x.shape[-2:]
    if (h, w) == (th, tw):
        return np.array(images, dtype=np.float32)
    r0, r1, rw = _bilinear_axis(h, th)
    c0, c1, cw = _bilinear_axis(w, tw)
    rows = x[..., r0, :] * (1 - rw)[:, None] + x[..., r1, :] * rw[:, None]
    out = rows[..., c0] * (1 - cw) + rows[..., c1] * cw
    return out.astype(np.float32)


def normalize(images: np.ndarray, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    if np.any(std <= 0):
        raise ConfigError(f"normalization std must be positive, got {std.ravel().tolist()}")
    return ((images - mean) / std).astype(np.float32)


def denormalize(images: np.ndarray, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (images * std + mean).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic data


def blob_centers(classes: int, rng: np.random.Generator, min_dist: float = 0.15) -> np.ndarray:
    while True:
        centers = rng.uniform(0.25, 0.75, size=(classes, 3))
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if d[np.triu_indices(classes, 1)].min() >= min_dist:
            return centers


def synthetic_blobs(
    classes: int, per_class: int, hw: int = 16, seed: int = 0, noise: float = 0.05
) -> Dataset:
    """Class ``c`` is a fixed pattern plus Gaussian pixel noise.

    Each pattern has a distinct per-channel mean (its center) and a smooth
    zero-mean texture, so pooled features separate the classes.
    """
    if classes < 2:
        raise ConfigError("synthetic_blobs needs at least two classes")
    rng = np.random.default_rng(seed)
    centers = blob_centers(classes, rng)
    coarse = rng.standard_normal((classes, 3, 4, 4))
    texture = resize_bilinear(coarse, (hw, hw)).astype(np.float64)
    texture -= texture.mean(axis=(2, 3), keepdims=True)
    texture *= 0.1 / np.maximum(np.abs(texture).max(axis=(2, 3), keepdims=True), 1e-12)
    bases = centers[:, :, None, None] + texture
    labels = np.repeat(np.arange(classes), per_class)
    images = bases[labels] + noise * rng.standard_normal((len(labels), 3, hw, hw))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, classes, f"blobs-{classes}x{per_class}-s{seed}")
