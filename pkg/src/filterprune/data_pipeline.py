"""Datasets, deterministic batching/augmentation, and probe sampling.

Images are kept as uint8 NCHW tensors and normalised per channel when a
batch is drawn, which keeps a full CIFAR-10 copy at ~180 MB.
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

CIFAR_RECORD = 1 + 3072
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_PER_FILE = 10_000
DATA_ROOT_ENV = "FILTERPRUNE_DATA"


class DatasetError(ValueError):
    pass


@dataclass
class DatasetHandle:
    source: str
    class_count: int
    train_x: torch.Tensor  # uint8 (N, C, H, W)
    train_y: torch.Tensor
    val_x: torch.Tensor
    val_y: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor
    spec: dict = field(default_factory=dict)

    @property
    def train_size(self) -> int:
        return len(self.train_y)

    @property
    def val_size(self) -> int:
        return len(self.val_y)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x.float() / 255.0 - self.mean[:, None, None]) / self.std[:, None, None]

    def train_tensors(self, indices=None):
        """Un-augmented, normalised training images (used for probes)."""
        if indices is None:
            return self.normalize(self.train_x), self.train_y
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return self.normalize(self.train_x[idx]), self.train_y[idx]

    def val_tensors(self):
        return self.normalize(self.val_x), self.val_y


@dataclass(frozen=True)
class ProbeSet:
    indices: tuple[int, ...]
    seed: int
    size: int


def _channel_stats(x: torch.Tensor):
    xf = x.float() / 255.0
    mean = xf.mean(dim=(0, 2, 3))
    std = xf.std(dim=(0, 2, 3)).clamp_min(1e-6)
    return mean, std


def _read_cifar_file(path: Path, checksums: dict | None):
    if not path.is_file():
        raise DatasetError(f"missing CIFAR-10 file: {path}")
    raw = path.read_bytes()
    if len(raw) != CIFAR_PER_FILE * CIFAR_RECORD:
        raise DatasetError(f"truncated or malformed CIFAR-10 file {path}: "
                           f"{len(raw)} bytes, expected {CIFAR_PER_FILE * CIFAR_RECORD}")
    if checksums and path.name in checksums:
        digest = hashlib.sha256(raw).hexdigest()
        if digest != checksums[path.name]:
            raise DatasetError(f"checksum mismatch for {path}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_PER_FILE, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"label out of range in {path}")
    images = arr[:, 1:].reshape(-1, 3, 32, 32)
    return torch.from_numpy(images.copy()), torch.from_numpy(labels)


def load_cifar10(root, checksums: dict | None = None):
    root = Path(root)
    parts = [_read_cifar_file(root / f, checksums) for f in CIFAR_TRAIN_FILES]
    train_x = torch.cat([p[0] for p in parts])
    train_y = torch.cat([p[1] for p in parts])
    val_x, val_y = _read_cifar_file(root / CIFAR_TEST_FILE, checksums)
    return train_x, train_y, val_x, val_y


def synthetic_blobs(classes: int, n: int, seed: int, size: int = 32, channels: int = 3,
                    val_n: int | None = None, noise: float = 0.35, jitter: float = 0.12):
    """Gaussian class blobs rendered as images.

    Each class owns a blob centre and a colour; samples jitter the centre,
    scale the blob, add a distractor blob of a random class at lower
    contrast, and add pixel noise.
    """
    val_n = n // 4 if val_n is None else val_n
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.25, 0.75, size=(classes, 2))
    colours = rng.uniform(-1.0, 1.0, size=(classes, channels))
    total = n + val_n
    labels = np.arange(total) % classes
    rng.shuffle(labels)
    grid = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    def render(cls, amp, width):
        c = centres[cls] + rng.normal(0, jitter, size=(len(cls), 2))
        d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
        blob = np.exp(-d2 / (2 * width[:, None, None] ** 2))
        return amp[:, None, None, None] * colours[cls][:, :, None, None] * blob[:, None]

    width = rng.uniform(0.08, 0.16, size=total)
    img = render(labels, rng.uniform(0.6, 1.0, size=total), width)
    distract = rng.integers(0, classes, size=total)
    img += render(distract, rng.uniform(0.2, 0.5, size=total), rng.uniform(0.08, 0.16, size=total))
    img += rng.normal(0, noise, size=img.shape)
    img = np.clip((img + 1.5) / 3.0, 0.0, 1.0)
    img = torch.from_numpy(np.round(img * 255).astype(np.uint8))
    y = torch.from_numpy(labels.astype(np.int64))
    return img[:n], y[:n], img[n:], y[n:]


def load_dataset(spec: dict) -> DatasetHandle:
    """Load from a spec dict.

    ``{"source": "cifar10", "root": ..., "train_subset": 5000, "seed": 0}`` or
    ``{"source": "synthetic", "classes": 4, "n": 2000, "seed": 7, "size": 32}``.
    A missing cifar10 root falls back to the FILTERPRUNE_DATA env var.
    """
    spec = dict(spec)
    source = spec.get("source", "synthetic")
    if source == "cifar10":
        root = spec.get("root") or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise DatasetError(f"cifar10 needs a root directory (or ${DATA_ROOT_ENV})")
        train_x, train_y, val_x, val_y = load_cifar10(root, spec.get("checksums"))
        classes = 10
    elif source == "synthetic":
        classes = int(spec.get("classes", 4))
        train_x, train_y, val_x, val_y = synthetic_blobs(
            classes, int(spec.get("n", 2000)), int(spec.get("seed", 0)),
            size=int(spec.get("size", 32)), val_n=spec.get("val_n"),
            noise=float(spec.get("noise", 0.35)))
    else:
        raise DatasetError(f"unknown dataset source {source!r}")

    subset = spec.get("train_subset")
    if subset:
        g = np.random.default_rng(int(spec.get("subset_seed", spec.get("seed", 0))))
        idx = torch.as_tensor(np.sort(g.choice(len(train_y), int(subset), replace=False)))
        train_x, train_y = train_x[idx], train_y[idx]
    val_subset = spec.get("val_subset")
    if val_subset:
        val_x, val_y = val_x[: int(val_subset)], val_y[: int(val_subset)]
    mean, std = _channel_stats(train_x)
    return DatasetHandle(source, classes, train_x, train_y, val_x, val_y, mean, std, spec)


def sample_probe(handle: DatasetHandle, size: int, seed: int, balanced: bool = False) -> ProbeSet:
    """Draw the fixed probe subset without replacement."""
    if size < 1 or size > handle.train_size:
        raise DatasetError(f"probe size {size} outside [1, {handle.train_size}]")
    rng = np.random.default_rng(seed)
    if not balanced:
        idx = rng.choice(handle.train_size, size, replace=False)
    else:
        labels = handle.train_y.numpy()
        per = np.array_split(np.arange(size), handle.class_count)
        idx = []
        for c, share in enumerate(per):
            pool = np.flatnonzero(labels == c)
            take = min(len(share), len(pool))
            idx.extend(rng.choice(pool, take, replace=False).tolist())
        rest = np.setdiff1d(np.arange(handle.train_size), idx)
        if len(idx) < size:
            idx.extend(rng.choice(rest, size - len(idx), replace=False).tolist())
        idx = np.asarray(idx)
    return ProbeSet(tuple(int(i) for i in np.sort(idx)), seed, size)


def epoch_generator(seed: int, stream: int, epoch: int) -> torch.Generator:
    """Independent RNG per (seed, stream, epoch) so resumed runs replay exactly."""
    ss = np.random.SeedSequence([seed, stream, epoch])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


def augment(x: torch.Tensor, gen: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random crop with zero padding plus horizontal flip, per sample."""
    n, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    flip = torch.rand(n, generator=gen) < 0.5
    rows = (dy[:, None] + torch.arange(h)[None, :])
    cols = (dx[:, None] + torch.arange(w)[None, :])
    cols = torch.where(flip[:, None], cols.flip(1), cols)
    bidx = torch.arange(n)[:, None, None]
    out = padded.permute(0, 2, 3, 1)[bidx, rows[:, :, None], cols[:, None, :]]
    return out.permute(0, 3, 1, 2).contiguous()


def train_batches(handle: DatasetHandle, batch_size: int, gen: torch.Generator, augmented: bool = True):
    perm = torch.randperm(handle.train_size, generator=gen)
    for start in range(0, handle.train_size, batch_size):
        idx = perm[start:start + batch_size]
        x = handle.normalize(handle.train_x[idx])
        if augmented:
            x = augment(x, gen)
        yield x, handle.train_y[idx]
