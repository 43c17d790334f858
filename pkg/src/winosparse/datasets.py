"""Dataset ingestion: IDX-format files (optionally gzipped) and a seeded
synthetic generator for desk-scale experiments.

The synthetic spec reads ``synthetic:<classes>x<samples>x<side>[:seed=K]``.
Each class gets a smoothed random template; a sample is its template at a
random amplitude plus pixel noise, quantized to u8. The task is easy for
an intact small CNN but degrades sharply when its filters are corrupted,
which is what the pruning experiments need to resolve.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["DatasetHandle", "ingest_dataset", "load_idx_images", "load_idx_labels"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTH_AMPLITUDE_RANGE = (0.7, 1.3)
SYNTH_NOISE_SIGMA = 1.0
SYNTH_CONTRAST = 40.0
SYNTH_STROKES_PER_CLASS = 4


@dataclass
class DatasetHandle:
    """u8 images with labels, normalization constants, and a disjoint
    train/test split."""

    images: np.ndarray  # [N, H, W] uint8
    labels: np.ndarray  # [N] int64
    classes: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    mean: float = 0.0
    std: float = 1.0
    name: str = "dataset"

    def __post_init__(self):
        if self.images.dtype != np.uint8:
            raise ValueError("DatasetHandle: images must be uint8")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError("DatasetHandle: label outside class range")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("DatasetHandle: train/test overlap")
        if self.std == 0.0:
            self.std = 1.0

    @property
    def image_side(self) -> int:
        return self.images.shape[1]

    def normalize(self, images: np.ndarray) -> np.ndarray:
        x = images.astype(np.float64) / 255.0
        return ((x - self.mean) / self.std)[:, None, :, :]  # add channel dim

    def train_arrays(self):
        return self.normalize(self.images[self.train_idx]), self.labels[self.train_idx]

    def test_arrays(self):
        return self.normalize(self.images[self.test_idx]), self.labels[self.test_idx]


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ValueError(f"{path}: truncated IDX header at byte offset {len(header)}")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(
                f"{path}: expected magic 0x{IDX_IMAGES_MAGIC:08x}, "
                f"found 0x{magic:08x} at byte offset 0"
            )
        data = fh.read(count * rows * cols)
    if len(data) != count * rows * cols:
        raise ValueError(
            f"{path}: expected {count * rows * cols} pixels, stream ended "
            f"at byte offset {16 + len(data)}"
        )
    return np.frombuffer(data, dtype=np.uint8).reshape(count, rows, cols).copy()


def load_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise ValueError(f"{path}: truncated IDX header at byte offset {len(header)}")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(
                f"{path}: expected magic 0x{IDX_LABELS_MAGIC:08x}, "
                f"found 0x{magic:08x} at byte offset 0"
            )
        data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"{path}: expected {count} labels, stream ended at byte offset {8 + len(data)}")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64).copy()


_DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1), (0, -1), (-1, 0), (-1, -1), (-1, 1))


def _stroke_template(rng: np.random.Generator, side: int) -> np.ndarray:
    """A sparse template of short bright/dark line strokes on a zero
    background. Classes differ in stroke geometry, so classification
    hinges on precise local filters rather than full-field averaging."""
    img = np.zeros((side, side))
    for _ in range(SYNTH_STROKES_PER_CLASS):
        u, v = rng.integers(2, side - 2, size=2)
        du, dv = _DIRECTIONS[rng.integers(0, len(_DIRECTIONS))]
        length = int(rng.integers(4, max(5, side // 2)))
        value = 1.0 if rng.random() < 0.5 else -1.0
        for step in range(length):
            a, b = u + step * du, v + step * dv
            if 0 <= a < side and 0 <= b < side:
                img[a, b] = value
    return img


def _synthetic(classes: int, samples: int, side: int, seed: int) -> DatasetHandle:
    rng = np.random.default_rng(seed)
    templates = np.stack([_stroke_template(rng, side) for _ in range(classes)])
    labels = np.arange(samples, dtype=np.int64) % classes
    labels = labels[rng.permutation(samples)]
    amp = rng.uniform(*SYNTH_AMPLITUDE_RANGE, size=samples)
    noise = rng.normal(scale=SYNTH_NOISE_SIGMA, size=(samples, side, side))
    signal = amp[:, None, None] * templates[labels] + noise
    images = np.clip(np.rint(128.0 + SYNTH_CONTRAST * signal), 0, 255).astype(np.uint8)
    split = int(round(samples * 0.8))
    perm = rng.permutation(samples)
    return _finalize(
        images, labels, classes, perm[:split], perm[split:],
        name=f"synthetic:{classes}x{samples}x{side}:seed={seed}",
    )


def _finalize(images, labels, classes, train_idx, test_idx, name) -> DatasetHandle:
    train = images[train_idx].astype(np.float64) / 255.0
    mean = float(train.mean())
    std = float(train.std())
    return DatasetHandle(
        images=images, labels=labels, classes=classes,
        train_idx=np.asarray(train_idx), test_idx=np.asarray(test_idx),
        mean=mean, std=std if std else 1.0, name=name,
    )


def _parse_synthetic_spec(spec: str):
    body = spec[len("synthetic:"):]
    parts = body.split(":")
    dims = parts[0].split("x")
    if len(dims) != 3:
        raise ValueError(
            f"bad synthetic spec {spec!r}: want synthetic:<classes>x<samples>x<side>[:seed=K]"
        )
    classes, samples, side = (int(d) for d in dims)
    seed = 0
    for extra in parts[1:]:
        if extra.startswith("seed="):
            seed = int(extra[5:])
        else:
            raise ValueError(f"bad synthetic spec option {extra!r}")
    if classes < 2 or samples < classes or side < 8:
        raise ValueError(f"synthetic spec {spec!r} out of supported range")
    return classes, samples, side, seed


def ingest_dataset(spec: str, split_seed: int = 0) -> DatasetHandle:
    """Load ``synthetic:<spec>`` or a directory of IDX files.

    A directory must contain train-images-idx3-ubyte / train-labels-idx1-ubyte
    (optionally .gz); if t10k-* files are present they become the test
    split, otherwise a deterministic 80/20 split is drawn.
    """
    if spec.startswith("synthetic:"):
        classes, samples, side, seed = _parse_synthetic_spec(spec)
        return _synthetic(classes, samples, side, seed)

    root = Path(spec)
    if not root.is_dir():
        raise ValueError(f"dataset path {spec!r} is not a directory or synthetic spec")

    def find(stem):
        for suffix in ("", ".gz"):
            p = root / (stem + suffix)
            if p.exists():
                return p
        return None

    img_path = find("train-images-idx3-ubyte")
    lab_path = find("train-labels-idx1-ubyte")
    if img_path is None or lab_path is None:
        raise ValueError(f"{spec}: missing train-images-idx3-ubyte / train-labels-idx1-ubyte")
    images = load_idx_images(img_path)
    labels = load_idx_labels(lab_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{spec}: {images.shape[0]} images but {labels.shape[0]} labels")
    classes = int(labels.max()) + 1

    timg_path = find("t10k-images-idx3-ubyte")
    tlab_path = find("t10k-labels-idx1-ubyte")
    if timg_path and tlab_path:
        test_images = load_idx_images(timg_path)
        test_labels = load_idx_labels(tlab_path)
        all_images = np.concatenate([images, test_images])
        all_labels = np.concatenate([labels, test_labels])
        train_idx = np.arange(images.shape[0])
        test_idx = np.arange(images.shape[0], all_images.shape[0])
        return _finalize(all_images, all_labels, classes, train_idx, test_idx, name=str(root))

    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(images.shape[0])
    split = int(round(images.shape[0] * 0.8))
    return _finalize(images, labels, classes, perm[:split], perm[split:], name=str(root))
