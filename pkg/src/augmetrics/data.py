"""Datasets: Gaussian mixtures, procedurally drawn shapes, CIFAR-10 binary files.

Images are stored as float32 arrays of shape (N, H, W, C) holding scaled
intensities in [0, 1].  Normalization statistics travel with the dataset
so augmentation can run in scaled space and normalization afterwards.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptRecordError, FormatError, ValidationError
from .rng import stream

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE


@dataclass(frozen=True)
class Stats:
    mean: np.ndarray
    std: np.ndarray
    # True for channels whose std was 0 and got replaced by 1
    fallback: tuple[bool, ...] = ()

    @property
    def degenerate(self) -> bool:
        return any(self.fallback)


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    stats: Stats | None = None
    normalized: bool = False

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValidationError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (N, H, W, C), got shape {self.images.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return dataclasses.replace(self, images=self.images[idx], labels=self.labels[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class GaussianMixtureSpec:
    means: np.ndarray
    covariances: np.ndarray
    samples_per_class: int

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covariances, dtype=np.float64)
        if covs.ndim == 2:
            covs = np.broadcast_to(covs, (len(means),) + covs.shape).copy()
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        if covs.shape != (len(means), self.dim, self.dim):
            raise ValidationError(f"covariances must have shape {(len(means), self.dim, self.dim)}, got {covs.shape}")
        for k, c in enumerate(covs):
            if not np.allclose(c, c.T):
                raise ValidationError(f"covariance {k} is not symmetric")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise ValidationError(f"covariance {k} is not positive definite")
        if self.samples_per_class < 0:
            raise ValidationError("samples_per_class must be >= 0")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class VectorDataset:
    points: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def as_images(self) -> LabeledDataset:
        """View points as 1x1 images with ``dim`` channels, for the trainer."""
        imgs = self.points.reshape(len(self), 1, 1, self.dim)
        return LabeledDataset(imgs, self.labels, self.num_classes)


# --------------------------------------------------------------------------
# Generators


def make_gaussian_mixture(spec: GaussianMixtureSpec, seed: int, shift=None) -> VectorDataset:
    """Draw ``samples_per_class`` points from each class Gaussian.

    ``shift`` (a vector) is added to every class mean; it is how the toy
    experiment produces mean-shifted validation sets.
    """
    n = spec.samples_per_class
    rng = stream(seed, "gaussian-mixture")
    shift = np.zeros(spec.dim) if shift is None else np.asarray(shift, dtype=np.float64)
    pts, labels = [], []
    for k in range(spec.num_classes):
        chol = np.linalg.cholesky(spec.covariances[k])
        z = rng.standard_normal((n, spec.dim))
        pts.append(spec.means[k] + shift + z @ chol.T)
        labels.append(np.full(n, k, dtype=np.int64))
    return VectorDataset(
        np.concatenate(pts) if pts else np.zeros((0, spec.dim)),
        np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64),
        spec.num_classes,
    )


def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u: column coordinate (right +), v: row coordinate (down +), both in shape units
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if kind == 0:  # triangle, apex up
        return inside & (np.abs(u) <= (v + 1) / 2)
    if kind == 1:  # triangle, apex down
        return inside & (np.abs(u) <= (1 - v) / 2)
    if kind == 2:  # horizontal bar
        return inside & (np.abs(v) <= 0.3)
    if kind == 3:  # vertical bar
        return inside & (np.abs(u) <= 0.3)
    if kind == 4:  # ring
        r = np.hypot(u, v)
        return (r <= 1) & (r >= 0.55)
    if kind == 5:  # plus
        return inside & ((np.abs(u) <= 0.22) | (np.abs(v) <= 0.22))
    if kind == 6:  # corner, arms up and left
        return inside & ((v <= -0.45) | (u <= -0.45))
    if kind == 7:  # diagonal bar
        return inside & (np.abs(u - v) <= 0.45)
    raise ValidationError(f"no shape for class {kind}")


NUM_SHAPES = 8
# rendering difficulty
JITTER = 0.25
SCALE = (0.4, 0.8)
CONTRAST = (0.2, 0.5)
NOISE = 0.2


def make_synthetic_images(num_classes: int, per_class: int, side: int, seed: int, channels: int = 1) -> LabeledDataset:
    """Render a balanced shape-classification task.

    Class ``k`` is the k-th shape of a fixed family (up/down triangles,
    bars, ring, plus, corner, diagonal), jittered in position, size and
    contrast and overlaid with pixel noise.  The family is chosen so that
    vertical flips and rotations change class identity while horizontal
    flips mostly do not.
    """
    if side < 8:
        raise ValidationError(f"side must be >= 8, got {side}")
    if not 2 <= num_classes <= NUM_SHAPES:
        raise ValidationError(f"num_classes must be in [2, {NUM_SHAPES}], got {num_classes}")
    if per_class < 0:
        raise ValidationError("per_class must be >= 0")
    n = num_classes * per_class
    rng = stream(seed, "synthetic-images")
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    cx, cy = rng.uniform(-JITTER, JITTER, size=(2, n))
    scale = rng.uniform(*SCALE, size=n)
    bg = rng.uniform(0.2, 0.5, size=n)
    fg = bg + rng.uniform(*CONTRAST, size=n)
    noise = rng.normal(0.0, NOISE, size=(n, side, side, channels))
    tint = rng.uniform(0.85, 1.0, size=(n, channels))

    coords = (np.arange(side) + 0.5) / side * 2 - 1
    vv, uu = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((n, side, side, channels), dtype=np.float64)
    for i in range(n):
        mask = _shape_mask(int(labels[i]), (uu - cx[i]) / scale[i], (vv - cy[i]) / scale[i])
        base = np.where(mask, fg[i], bg[i])
        images[i] = base[:, :, None] * tint[i]
    images = np.clip(images + noise, 0.0, 1.0).astype(np.float32)
    order = stream(seed, "synthetic-order").permutation(n)
    return LabeledDataset(images[order], labels[order], num_classes)


# --------------------------------------------------------------------------
# CIFAR-10 binary container


def load_cifar_binary(path: str | os.PathLike, max_records: int | None = None) -> LabeledDataset:
    size = os.path.getsize(path)
    if size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD}; record {size // CIFAR_RECORD} is truncated")
    count = size // CIFAR_RECORD
    if max_records is not None:
        count = min(count, max_records)
    raw = np.fromfile(path, dtype=np.uint8, count=count * CIFAR_RECORD).reshape(count, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CorruptRecordError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    pixels = raw[:, 1:].reshape(count, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    images = pixels.astype(np.float32) / np.float32(255.0)
    return LabeledDataset(images, labels, 10)


def write_cifar_binary(ds: LabeledDataset, path: str | os.PathLike) -> None:
    """Write 32x32x3 images in the CIFAR-10 record layout (values rounded to /255)."""
    if ds.shape != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise ValidationError(f"CIFAR records hold 32x32x3 images, got {ds.shape}")
    if len(ds) and (ds.labels.min() < 0 or ds.labels.max() > 9):
        raise ValidationError("CIFAR labels must be in [0, 9]")
    pixels = np.rint(np.clip(ds.images, 0, 1) * 255).astype(np.uint8)
    planes = pixels.transpose(0, 3, 1, 2).reshape(len(ds), -1)
    out = np.concatenate([ds.labels.astype(np.uint8)[:, None], planes], axis=1)
    out.tofile(path)


# --------------------------------------------------------------------------
# Splits and normalization


def split_balanced(ds: LabeledDataset, train_size: int, val_size: int, seed: int):
    """Shuffle, take a class-balanced training subset, and a validation subset from the rest."""
    if train_size < 0 or val_size < 0:
        raise ValidationError("split sizes must be non-negative")
    if train_size + val_size > len(ds):
        raise ValidationError(f"train_size + val_size = {train_size + val_size} exceeds dataset size {len(ds)}")
    rng = stream(seed, "split")
    order = rng.permutation(len(ds))
    k = ds.num_classes
    quota = np.full(k, train_size // k)
    quota[rng.permutation(k)[: train_size % k]] += 1
    available = np.bincount(ds.labels, minlength=k)
    if np.any(quota > available):
        raise ValidationError(f"cannot draw a balanced training set of {train_size}: class counts are {available.tolist()}")
    taken = np.zeros(k, dtype=np.int64)
    train_idx, rest = [], []
    for i in order:
        c = ds.labels[i]
        if taken[c] < quota[c]:
            taken[c] += 1
            train_idx.append(i)
        else:
            rest.append(i)
    val_idx = rest[:val_size]
    return ds.subset(train_idx), ds.subset(val_idx)


def fit_stats(ds: LabeledDataset) -> Stats:
    flat = ds.images.reshape(-1, ds.images.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    fallback = tuple(bool(s == 0) for s in std)
    std = np.where(std == 0, 1.0, std)
    return Stats(mean.astype(np.float32), std.astype(np.float32), fallback)


def with_stats(ds: LabeledDataset, stats: Stats) -> LabeledDataset:
    return dataclasses.replace(ds, stats=stats)


def normalize_images(images: np.ndarray, stats: Stats) -> np.ndarray:
    return ((images - stats.mean) / stats.std).astype(np.float32)


def normalize(ds: LabeledDataset, stats: Stats | None = None) -> LabeledDataset:
    """Subtract the per-channel mean and divide by the std.

    Without ``stats`` the statistics are fitted on ``ds`` itself (use that
    for the training split); pass the training statistics for validation
    and test splits.
    """
    if ds.normalized:
        raise ValidationError("dataset is already normalized")
    stats = fit_stats(ds) if stats is None else stats
    return dataclasses.replace(ds, images=normalize_images(ds.images, stats), stats=stats, normalized=True)
