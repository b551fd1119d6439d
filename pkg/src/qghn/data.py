"""Image datasets: CIFAR-10 (binary version) and a synthetic stand-in.

Both end up as an :class:`ImageDataset` of float32 ``(N, 3, 32, 32)``
tensors scaled to [0, 1] and then standardized per channel with the
training split's mean/std.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor
    mean: tuple
    std: tuple
    classes: int
    name: str = "dataset"
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "classes": self.classes,
            "n_train": int(self.train_x.shape[0]),
            "n_test": int(self.test_x.shape[0]),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            **self.extra,
        }


def _standardize(train: np.ndarray, test: np.ndarray):
    """Per-channel standardization with training statistics."""
    if train.shape[0] == 0:
        mean = np.zeros(3)
        std = np.ones(3)
    else:
        mean = train.mean(axis=(0, 2, 3), dtype=np.float64)
        std = train.std(axis=(0, 2, 3), dtype=np.float64)
        std[std == 0] = 1.0
    m = mean.reshape(1, 3, 1, 1)
    s = std.reshape(1, 3, 1, 1)
    tr = ((train - m) / s).astype(np.float32)
    te = ((test - m) / s).astype(np.float32)
    return tr, te, tuple(float(v) for v in mean), tuple(float(v) for v in std)


def parse_cifar_records(data: bytes, name: str = "<bytes>"):
    """Split raw CIFAR-10 binary records into labels ``(N,)`` and pixels ``(N, 3, 32, 32)`` (uint8)."""
    if len(data) % CIFAR_RECORD:
        raise DataFormatError(
            f"{name}: size {len(data)} is not a multiple of {CIFAR_RECORD} "
            f"(partial record at byte offset {len(data) - len(data) % CIFAR_RECORD})"
        )
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"{name}: label {labels[i]} > 9 in record {i} (byte offset {i * CIFAR_RECORD})")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32)
    return labels.copy(), pixels.copy()


def serialize_cifar_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def load_cifar10(directory, classes: int = 10) -> ImageDataset:
    """Load the binary CIFAR-10 batches from ``directory``.

    ``classes < 10`` keeps only labels ``0..classes-1`` (handy for quick runs).
    """
    tr_l, tr_p = zip(*(parse_cifar_records(_read(os.path.join(directory, f)), f) for f in CIFAR_TRAIN_FILES))
    te_l, te_p = parse_cifar_records(_read(os.path.join(directory, CIFAR_TEST_FILE)), CIFAR_TEST_FILE)
    tr_l, tr_p = np.concatenate(tr_l), np.concatenate(tr_p)
    if classes < 10:
        keep, keep_te = tr_l < classes, te_l < classes
        tr_l, tr_p, te_l, te_p = tr_l[keep], tr_p[keep], te_l[keep_te], te_p[keep_te]
    tr, te, mean, std = _standardize(tr_p.astype(np.float64) / 255.0, te_p.astype(np.float64) / 255.0)
    return ImageDataset(
        torch.from_numpy(tr),
        torch.from_numpy(tr_l.astype(np.int64)),
        torch.from_numpy(te),
        torch.from_numpy(te_l.astype(np.int64)),
        mean,
        std,
        classes,
        name="cifar10",
    )


@dataclass
class SynthConfig:
    """Class-conditional blobs: each class has its own colour and blob centre.

    ``noise`` is the per-pixel Gaussian noise std (in [0, 1] pixel units);
    raising it (or ``jitter``) makes the task harder.
    """

    n_train: int = 2000
    n_test: int = 512
    classes: int = 4
    noise: float = 0.25
    blob_sigma: float = 6.0
    jitter: float = 3.0
    min_color_dist: float = 0.35
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _class_prototypes(cfg: SynthConfig, rng: np.random.Generator):
    colors = []
    while len(colors) < cfg.classes:
        c = rng.uniform(0.0, 1.0, size=3)
        if all(np.linalg.norm(c - o) >= cfg.min_color_dist for o in colors):
            colors.append(c)
    centers = rng.uniform(8.0, 24.0, size=(cfg.classes, 2))
    return np.array(colors), centers


def _render(labels, colors, centers, cfg: SynthConfig, rng):
    n = len(labels)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    c = centers[labels] + rng.normal(0.0, cfg.jitter, size=(n, 2))
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    blob = np.exp(-d2 / (2 * cfg.blob_sigma**2))  # (n, 32, 32)
    img = 0.5 + (colors[labels][:, :, None, None] - 0.5) * blob[:, None]
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(cfg: SynthConfig) -> ImageDataset:
    """Deterministic synthetic dataset (a pure function of ``cfg``)."""
    rng = np.random.default_rng(cfg.seed)
    colors, centers = _class_prototypes(cfg, rng)
    tr_y = rng.integers(0, cfg.classes, size=cfg.n_train)
    te_y = rng.integers(0, cfg.classes, size=cfg.n_test)
    tr = _render(tr_y, colors, centers, cfg, rng) if cfg.n_train else np.zeros((0, 3, 32, 32))
    te = _render(te_y, colors, centers, cfg, rng) if cfg.n_test else np.zeros((0, 3, 32, 32))
    tr, te, mean, std = _standardize(tr, te)
    return ImageDataset(
        torch.from_numpy(tr),
        torch.from_numpy(tr_y.astype(np.int64)),
        torch.from_numpy(te),
        torch.from_numpy(te_y.astype(np.int64)),
        mean,
        std,
        cfg.classes,
        name="synth",
        extra={"synth": cfg.to_dict()},
    )
