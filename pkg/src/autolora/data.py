"""Seeded synthetic tasks, CSV/IDX ingestion, splitting and batching.

All features live in the unit box; synthetic features are mapped into
[0.05, 0.95] so any perturbation of radius <= 0.05 starts inside the box.
"""
from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .nn import ConfigurationError, FormatError

KINDS = ("blobs", "rings", "moons")
FEATURE_LOW, FEATURE_HIGH = 0.05, 0.95


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""
    seed: int | None = None

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ConfigurationError(f"dataset shapes disagree: x{self.x.shape}, y{self.y.shape}")

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, name or self.name, self.seed)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        return h.hexdigest()


def _to_box(pts: np.ndarray) -> np.ndarray:
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    span[span == 0] = 1.0
    return FEATURE_LOW + (pts - lo) / span * (FEATURE_HIGH - FEATURE_LOW)


def make_synthetic(kind: str, n: int, d: int, z: int, margin: float = 1.0, noise: float = 0.1,
                   seed: int = 0) -> Dataset:
    """Class structure in the first two coordinates, seeded noise in the rest.

    blobs: Gaussian clusters on a circle of radius ``2 * margin``.
    rings: concentric rings of radius ``margin * (k + 1)`` for class ``k``.
    moons: ``z`` interleaved half-circles spaced ``margin`` apart.
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")
    if z < 2 or n < 10 * z or d < 2 or margin <= 0 or noise < 0:
        raise ConfigurationError(f"invalid synthetic sizes: n={n}, d={d}, z={z}, margin={margin}, noise={noise}")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % z
    rng.shuffle(y)
    if kind == "blobs":
        angles = 2 * np.pi * np.arange(z) / z
        centers = 2 * margin * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        plane = centers[y] + rng.normal(0, noise, size=(n, 2))
    elif kind == "rings":
        theta = rng.uniform(0, 2 * np.pi, size=n)
        radius = margin * (y + 1) + rng.normal(0, noise, size=n)
        plane = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    else:
        t = rng.uniform(0, np.pi, size=n)
        flip = np.where(y % 2 == 0, 1.0, -1.0)
        plane = np.stack([np.cos(t) + y * margin, flip * np.sin(t) - 0.5 * (y % 2)], axis=1)
        plane = plane + rng.normal(0, noise, size=(n, 2))
    pts = np.concatenate([plane, rng.normal(0, noise, size=(n, d - 2))], axis=1)
    return Dataset(_to_box(pts), y.astype(np.int64), z, f"{kind}-s{seed}", seed)


def load_csv(path: str | Path, d: int, z: int, header: bool = False) -> Dataset:
    """Rows of ``d`` real features followed by one integer label."""
    xs, ys = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 1:
                raise FormatError(f"{path}:{lineno}: expected {d + 1} columns, got {len(row)}")
            try:
                feats = [float(c) for c in row[:d]]
                label = int(row[d])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= label < z:
                raise ValueError(f"{path}:{lineno}: label {label} outside [0, {z})")
            xs.append(feats)
            ys.append(label)
    x = np.asarray(xs, dtype=np.float64).reshape(-1, d)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite feature values")
    return Dataset(x, np.asarray(ys, dtype=np.int64), z, Path(path).stem)


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: IDX magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    data = np.frombuffer(blob, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: payload has {data.size} bytes, header says {int(np.prod(dims))}")
    return data.reshape(dims)


def load_idx(images: str | Path, labels: str | Path, z: int) -> Dataset:
    """MNIST-style IDX pair; pixels are scaled by 1/255 and flattened."""
    x = _read_idx(Path(images), 0x00000803)
    y = _read_idx(Path(labels), 0x00000801).astype(np.int64)
    if len(x) != len(y):
        raise FormatError(f"{len(x)} images but {len(y)} labels")
    if y.size and y.max() >= z:
        raise ValueError(f"label {int(y.max())} outside [0, {z})")
    return Dataset(x.reshape(len(x), -1).astype(np.float64) / 255.0, y, z, Path(images).stem)


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float = 0.05
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ConfigurationError(f"split fractions must be >= 0 and sum below 1: {self}")


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded permutation partition into (train, val, test)."""
    n = len(ds)
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_val = int(round(n * spec.val_fraction))
    n_test = int(round(n * spec.test_fraction))
    val_idx, test_idx, train_idx = perm[:n_val], perm[n_val:n_val + n_test], perm[n_val + n_test:]
    return (ds.subset(train_idx, f"{ds.name}/train"),
            ds.subset(val_idx, f"{ds.name}/val"),
            ds.subset(test_idx, f"{ds.name}/test"))


def batches(ds: Dataset, batch_size: int, run_seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled minibatches; the order depends only on ``(run_seed, epoch)``."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([run_seed, epoch]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.x[idx], ds.y[idx]
