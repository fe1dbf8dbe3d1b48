"""Image datasets: CIFAR binary batches, the synthetic grating set, augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

log = structlog.get_logger(__name__)

IMAGE_SHAPE = (3, 32, 32)
PIXEL_BYTES = 3 * 32 * 32
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{index}.bin" for index in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR100_TRAIN_FILE = "train.bin"
CIFAR100_TEST_FILE = "test.bin"
SPLIT_NAMES = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """Raised for malformed CIFAR binary files; carries the file and byte offset."""

    def __init__(self, path: Path, offset: int, message: str) -> None:
        self.path = Path(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (at byte offset {offset})")


@dataclass
class Dataset:
    """Normalised images with disjoint train/val/test index sets."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    splits: Dict[str, np.ndarray]
    num_classes: int
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        missing = [name for name in SPLIT_NAMES if name not in self.splits]
        if missing:
            raise ValueError(f"dataset {self.name!r} lacks splits {missing}")
        seen = np.concatenate([self.splits[name] for name in SPLIT_NAMES])
        if len(np.unique(seen)) != len(seen):
            raise ValueError(f"dataset {self.name!r} has overlapping splits")

    def subset(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        index = self.splits[split]
        return self.images[index], self.labels[index]

    def size(self, split: str) -> int:
        return int(len(self.splits[split]))

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def normalization(self) -> Dict[str, List[float]]:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}


def normalize(images: np.ndarray, train_index: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scale to zero mean / unit variance per channel using train-split statistics."""
    train = images[train_index].astype(np.float64)
    mean = train.mean(axis=(0, 2, 3))
    std = train.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    scaled = (images.astype(np.float64) - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return scaled.astype(np.float32), mean.astype(np.float32), std.astype(np.float32)


# ----------------------------------------------------------------------------
# CIFAR binary format


def read_cifar_batch(
    path: Path, *, label_bytes: int = 1, expected_records: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Parse a CIFAR binary batch into uint8 ``(N, 3, 32, 32)`` images and labels.

    The last label byte is the class (the fine label for CIFAR-100).
    """
    path = Path(path)
    record = label_bytes + PIXEL_BYTES
    raw = path.read_bytes()
    complete = len(raw) // record
    if len(raw) % record:
        raise DatasetFormatError(
            path, complete * record, f"truncated record: {len(raw) % record} of {record} bytes"
        )
    if expected_records is not None and complete != expected_records:
        raise DatasetFormatError(path, len(raw), f"expected {expected_records} records, found {complete}")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(complete, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    images = rows[:, label_bytes:].reshape(complete, *IMAGE_SHAPE).copy()
    return images, labels


def write_cifar_batch(
    path: Path, images: np.ndarray, labels: Sequence[int], *, label_bytes: int = 1
) -> None:
    """Write records in the CIFAR binary layout (coarse label byte written as 0)."""
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != IMAGE_SHAPE or len(images) != len(labels):
        raise ValueError(f"expected (N, 3, 32, 32) images matching labels, got {images.shape}")
    rows = np.zeros((len(images), label_bytes + PIXEL_BYTES), dtype=np.uint8)
    rows[:, label_bytes - 1] = np.asarray(labels, dtype=np.uint8)
    rows[:, label_bytes:] = images.reshape(len(images), -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(rows.tobytes())


def split_indices(
    train_count: int, test_count: int, *, val_size: int, seed: int, split: str = "holdout"
) -> Dict[str, np.ndarray]:
    """Seeded shuffle of the training records into train/val; test follows them.

    ``split="full"`` trains on every training record and validates on the test set.
    """
    test = np.arange(train_count, train_count + test_count)
    if split == "full":
        return {"train": np.arange(train_count), "val": test, "test": test[:0]}
    if split != "holdout":
        raise ValueError(f"unknown split mode {split!r}")
    if not 0 < val_size < train_count:
        raise ValueError(f"val_size {val_size} must lie in (0, {train_count})")
    order = np.random.default_rng(seed).permutation(train_count)
    return {"train": np.sort(order[val_size:]), "val": np.sort(order[:val_size]), "test": test}


def _assemble(
    name: str,
    train: Tuple[np.ndarray, np.ndarray],
    test: Tuple[np.ndarray, np.ndarray],
    num_classes: int,
    *,
    val_size: int,
    seed: int,
    split: str,
) -> Dataset:
    images = np.concatenate([train[0], test[0]])
    labels = np.concatenate([train[1], test[1]])
    if labels.max(initial=0) >= num_classes:
        raise ValueError(f"{name}: label {labels.max()} outside {num_classes} classes")
    splits = split_indices(len(train[0]), len(test[0]), val_size=val_size, seed=seed, split=split)
    scaled, mean, std = normalize(images, splits["train"])
    log.info("dataset_loaded", dataset=name, **{k: int(len(v)) for k, v in splits.items()})
    return Dataset(name, scaled, labels, splits, num_classes, mean, std)


def _read_many(paths: Iterable[Path], label_bytes: int, expected: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    parts = [read_cifar_batch(p, label_bytes=label_bytes, expected_records=expected) for p in paths]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _require_files(root: Path, names: Iterable[str]) -> List[Path]:
    paths = [root / name for name in names]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"{root} is missing CIFAR batch files: {', '.join(missing)}")
    return paths


def load_cifar10(
    path: Path,
    *,
    val_size: int = 10000,
    seed: int = 0,
    split: str = "holdout",
    records_per_file: Optional[int] = 10000,
) -> Dataset:
    root = Path(path)
    train = _read_many(_require_files(root, CIFAR10_TRAIN_FILES), 1, records_per_file)
    test = _read_many(_require_files(root, [CIFAR10_TEST_FILE]), 1, records_per_file)
    return _assemble("cifar10", train, test, 10, val_size=val_size, seed=seed, split=split)


def load_cifar100(
    path: Path,
    *,
    val_size: int = 10000,
    seed: int = 0,
    split: str = "holdout",
    train_records: Optional[int] = 50000,
    test_records: Optional[int] = 10000,
) -> Dataset:
    root = Path(path)
    train = _read_many(_require_files(root, [CIFAR100_TRAIN_FILE]), 2, train_records)
    test = _read_many(_require_files(root, [CIFAR100_TEST_FILE]), 2, test_records)
    return _assemble("cifar100", train, test, 100, val_size=val_size, seed=seed, split=split)


# ----------------------------------------------------------------------------
# Synthetic gratings


def render_synthetic(
    labels: np.ndarray,
    rng: np.random.Generator,
    *,
    num_classes: int,
    image_size: int = 32,
    noise: float = 1.0,
    phase_jitter: float = np.pi / 4,
) -> np.ndarray:
    """Oriented sinusoidal gratings with a class colour cast plus Gaussian noise.

    Class ``k`` uses orientation ``pi * k / num_classes``, ``2 + k % 3`` cycles
    per image and a cosine colour offset; noise has standard deviation ``noise``.
    """
    labels = np.asarray(labels)
    grid = np.arange(image_size, dtype=np.float64) / image_size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    theta = np.pi * labels / num_classes
    cycles = 2.0 + labels % 3
    phase = rng.uniform(-phase_jitter, phase_jitter, size=len(labels))
    coords = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    grating = np.sin(2 * np.pi * cycles[:, None, None] * coords + phase[:, None, None])
    channel = np.arange(3)
    color = 0.5 * np.cos(2 * np.pi * (labels[:, None] / num_classes + channel[None, :] / 3))
    images = grating[:, None] + color[:, :, None, None]
    images += noise * rng.standard_normal(images.shape)
    return images.astype(np.float32)


def synth_dataset(
    seed: int,
    num_classes: int = 10,
    samples_per_class: int = 200,
    *,
    image_size: int = 32,
    noise: float = 1.0,
    val_fraction: float = 0.2,
    test_fraction: float = 0.2,
) -> Dataset:
    """Deterministic balanced synthetic dataset; equal seeds give identical arrays."""
    if num_classes < 2:
        raise ValueError("synthetic dataset needs at least 2 classes")
    per_val = int(round(samples_per_class * val_fraction))
    per_test = int(round(samples_per_class * test_fraction))
    if per_val < 1 or per_test < 1 or per_val + per_test >= samples_per_class:
        raise ValueError(f"samples_per_class={samples_per_class} too small for the requested splits")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    images = render_synthetic(labels, rng, num_classes=num_classes, image_size=image_size, noise=noise)
    parts: Dict[str, List[np.ndarray]] = {name: [] for name in SPLIT_NAMES}
    for klass in range(num_classes):
        members = rng.permutation(np.flatnonzero(labels == klass))
        parts["test"].append(members[:per_test])
        parts["val"].append(members[per_test : per_test + per_val])
        parts["train"].append(members[per_test + per_val :])
    splits = {name: np.sort(np.concatenate(chunks)) for name, chunks in parts.items()}
    scaled, mean, std = normalize(images, splits["train"])
    return Dataset("synthetic", scaled, labels.astype(np.int64), splits, num_classes, mean, std)


# ----------------------------------------------------------------------------
# Augmentation


def cutout(image: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Zero a ``length`` square centred uniformly on a ``(C, H, W)`` image."""
    if length < 0:
        raise ValueError("cutout length must be >= 0")
    if length == 0:
        return image
    _, height, width = image.shape
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    y0, x0 = cy - length // 2, cx - length // 2
    out = image.copy()
    out[:, max(y0, 0) : max(min(y0 + length, height), 0), max(x0, 0) : max(min(x0 + length, width), 0)] = 0
    return out


def random_flip(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(batch)) < 0.5
    out = batch.copy()
    out[flip] = out[flip, :, :, ::-1]
    return out


def make_augment(cutout_length: int = 0, flip: bool = False):
    """Batch augmentation callable, or ``None`` when nothing is enabled."""
    if cutout_length <= 0 and not flip:
        return None

    def augment(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if flip:
            batch = random_flip(batch, rng)
        if cutout_length > 0:
            batch = np.stack([cutout(image, cutout_length, rng) for image in batch])
        return batch

    return augment
