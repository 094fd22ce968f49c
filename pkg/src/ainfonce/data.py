"""Datasets, vector augmentations and CoreACL batch assembly."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ValueError("dataset needs at least one row of features")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("label count does not match feature rows")
        if np.any(self.X < 0) or np.any(self.X > 1) or not np.all(np.isfinite(self.X)):
            raise ValueError("features must lie in [0, 1]")
        if np.any(self.y < 0):
            raise ValueError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1


def load_csv_dataset(path, split: str = "train") -> Dataset:
    """Read ``label,f0,f1,...`` rows; row order is preserved."""
    path = Path(path)
    labels, rows = [], []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "label":
            raise ValueError(f"{path}: missing 'label,f0,...' header")
        width = len(header)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} fields, got {len(rec)}")
            try:
                lab = int(rec[0])
                feats = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            if lab < 0:
                raise ValueError(f"{path}:{lineno}: negative label {lab}")
            for col, v in enumerate(feats, start=1):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{path}:{lineno}: column {col} value {v!r} outside [0, 1]")
            labels.append(lab)
            rows.append(feats)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), split, path.stem)


def save_csv_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("label," + ",".join(f"f{j}" for j in range(ds.dim)) + "\n")
        for lab, row in zip(ds.y, ds.X):
            fh.write(f"{int(lab)}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def _centers(C: int, D: int) -> np.ndarray:
    # one-hot simplex when it fits, otherwise distinct corners of a binary grid
    if C <= D:
        codes = np.eye(C, D)
    else:
        bits = list(itertools.islice(itertools.product((0.0, 1.0), repeat=D), 1, C + 1))
        if len(bits) < C:
            raise ValueError(f"cannot place {C} distinct centers in {D} dims")
        codes = np.array(bits)
    return 0.2 + 0.6 * codes


def gen_blobs(classes: int, dim: int, n_per_class: int, spread: float, seed: int,
              split: str = "train") -> Dataset:
    """Gaussian blobs around well separated centers in ``[0.2, 0.8]^dim``.

    Rows are grouped by class; the result is clipped to ``[0, 1]``.
    """
    if classes < 2:
        raise ValueError("gen_blobs needs at least two classes")
    rng = np.random.default_rng(seed)
    centers = _centers(classes, dim)
    y = np.repeat(np.arange(classes), n_per_class)
    X = centers[y] + spread * rng.standard_normal((y.size, dim))
    return Dataset(np.clip(X, 0.0, 1.0), y, split, f"blobs{classes}x{dim}")


def default_blobs(seed: int = 0, classes: int = 10, dim: int = 32, n_train: int = 200,
                  n_test: int = 50, spread: float = 0.15) -> tuple[Dataset, Dataset]:
    """Desk-scale train/test pair from independent streams of one seed."""
    s_train, s_test = np.random.SeedSequence(seed).generate_state(2)
    return (gen_blobs(classes, dim, n_train, spread, int(s_train), "train"),
            gen_blobs(classes, dim, n_test, spread, int(s_test), "test"))


@dataclass
class AugmentPolicy:
    noise_sigma: float = 0.05
    mask_prob: float = 0.1
    brightness: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.brightness
        self.brightness = (float(lo), float(hi))
        if self.noise_sigma < 0 or not 0 <= self.mask_prob <= 1 or lo > hi:
            raise ValueError(f"invalid augmentation policy {self}")


def augment(x: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Brightness scale, Gaussian noise, coordinate masking, then clip.

    ``x`` may be a single vector or a batch of rows (one brightness draw
    per row).
    """
    x = np.asarray(x, dtype=np.float64)
    rows = x if x.ndim == 2 else x[None, :]
    lo, hi = policy.brightness
    scale = rng.uniform(lo, hi, size=(rows.shape[0], 1))
    out = rows * scale + policy.noise_sigma * rng.standard_normal(rows.shape)
    keep = rng.random(rows.shape) >= policy.mask_prob
    out = np.clip(out * keep, 0.0, 1.0)
    return out if x.ndim == 2 else out[0]


@dataclass
class ContrastiveBatch:
    """Two clean views and (later) one adversarial view per instance."""

    indices: np.ndarray
    view1: np.ndarray
    view2: np.ndarray
    x_hat: np.ndarray
    adv: np.ndarray | None = None

    @property
    def B(self) -> int:
        return len(self.indices)

    def inputs(self) -> np.ndarray:
        if self.adv is None:
            raise ValueError("adversarial views have not been attached")
        return np.vstack([self.view1, self.view2, self.adv])

    def positives(self, a: int) -> list[int]:
        from .losses import positives
        return positives(a, self.B)

    def negatives(self, a: int) -> list[int]:
        from .losses import negatives
        return negatives(a, self.B)


def make_batch(ds: Dataset, indices, rng: np.random.Generator,
               policy: AugmentPolicy) -> ContrastiveBatch:
    indices = np.asarray(indices, dtype=np.int64)
    if np.unique(indices).size != indices.size:
        raise ValueError("make_batch: duplicate indices")
    if indices.size == 0 or indices.min() < 0 or indices.max() >= ds.n:
        raise ValueError("make_batch: index out of range")
    x = ds.X[indices]
    return ContrastiveBatch(indices, augment(x, rng, policy), augment(x, rng, policy), x.copy())


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation of ``range(n)`` cut into batches (last may be short)."""
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n)
    return [perm[k:k + batch_size] for k in range(0, n, batch_size)]
