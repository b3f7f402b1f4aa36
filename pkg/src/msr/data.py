"""CIFAR binary ingestion, a synthetic shapes dataset, and seeded batching."""

from __future__ import annotations

import colorsys
import glob
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CIFAR_SIZE = 32
CIFAR_PIXELS = 3 * CIFAR_SIZE * CIFAR_SIZE


class FormatError(ValueError):
    """A dataset file does not match the expected binary layout."""


@dataclass
class Dataset:
    """Images as [N, H, W, 3] float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be [N, H, W, 3], got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


# ---------------------------------------------------------------------------
# CIFAR binary layout
# ---------------------------------------------------------------------------


def _label_bytes(class_count: int) -> int:
    # CIFAR-100 records carry (coarse, fine); CIFAR-10 a single label byte
    return 2 if class_count == 100 else 1


def load_cifar_binary(paths: str | os.PathLike | Sequence[str | os.PathLike], class_count: int = 10) -> Dataset:
    """Read one or more CIFAR-10/100 binary files.

    Each record is the label byte(s) followed by 3072 pixel bytes: the red,
    green and blue 32x32 planes in row-major order.  For CIFAR-100 the fine
    label (second byte) is used.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    lb = _label_bytes(class_count)
    record = lb + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % record:
            raise FormatError(f"{path}: size {raw.size} is not a multiple of the {record}-byte record")
        recs = raw.reshape(-1, record)
        lab = recs[:, lb - 1].astype(np.int64)
        if lab.size and lab.max() >= class_count:
            raise FormatError(f"{path}: label {lab.max()} exceeds class count {class_count}")
        px = recs[:, lb:].reshape(-1, 3, CIFAR_SIZE, CIFAR_SIZE).transpose(0, 2, 3, 1)
        images.append(px.astype(np.float32) / np.float32(255))
        labels.append(lab)
    if not images:
        raise FormatError("no CIFAR files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), class_count)


def save_cifar_binary(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write ``dataset`` in the CIFAR binary layout (CIFAR-100 gets coarse label 0)."""
    if dataset.images.shape[1:] != (CIFAR_SIZE, CIFAR_SIZE, 3):
        raise ValueError(f"CIFAR layout needs 32x32x3 images, got {dataset.images.shape[1:]}")
    lb = _label_bytes(dataset.class_count)
    n = len(dataset)
    out = np.zeros((n, lb + CIFAR_PIXELS), dtype=np.uint8)
    out[:, lb - 1] = dataset.labels
    px = np.rint(dataset.images.astype(np.float64) * 255).clip(0, 255).astype(np.uint8)
    out[:, lb:] = px.transpose(0, 3, 1, 2).reshape(n, -1)
    out.tofile(path)


def load_cifar_dir(directory: str | os.PathLike, class_count: int = 10) -> tuple[Dataset, Dataset]:
    """(train, test) from a directory holding the standard CIFAR binary files."""
    d = os.fspath(directory)
    if class_count == 100:
        train, test = [os.path.join(d, "train.bin")], [os.path.join(d, "test.bin")]
    else:
        train = sorted(glob.glob(os.path.join(d, "data_batch_*.bin")))
        test = [os.path.join(d, "test_batch.bin")]
    missing = [p for p in train + test if not os.path.exists(p)]
    if not train or missing:
        raise FileNotFoundError(f"CIFAR files missing under {d}: {missing or 'no training batches'}")
    return load_cifar_binary(train, class_count), load_cifar_binary(test, class_count)


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

RECIPES = ("shapes", "silhouettes")
SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "bar", "xshape")


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic shapes on a grayscale noise background.

    ``recipe="shapes"``: class c draws shape ``SHAPES[c]`` in hue
    ``c / class_count``; each sample's hue is offset uniformly within
    +/- (1 - contrast) / 2 of a full turn.  The background carries no chroma,
    so an image's mean chroma points along its shape's hue.  Whenever the hue
    intervals of different classes are disjoint, i.e.
    ``contrast > 1 - 1/class_count``, the classes occupy disjoint angular
    sectors of the mean-chroma plane, so raw pixels are linearly separable by
    class.  Lower contrast leaves shape as the main class evidence.

    ``recipe="silhouettes"``: shape is the only class evidence.  Each object
    gets a random hue with saturation up to ``chroma`` and a brightness above
    its darker background, so color, brightness and placement are nuisances
    that the augmentations perturb.
    """

    class_count: int = 4
    per_class: int = 500
    size: int = 32
    recipe: str = "shapes"
    seed: int = 0
    contrast: float = 1.0
    noise: float = 0.08
    chroma: float = 0.0

    def validate(self) -> None:
        if not 2 <= self.class_count <= len(SHAPES):
            raise ValueError(f"class_count must be in [2, {len(SHAPES)}], got {self.class_count}")
        if self.size < 16:
            raise ValueError(f"size must be at least 16, got {self.size}")
        if self.per_class < 1:
            raise ValueError("per_class must be positive")
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown synthetic recipe {self.recipe!r}")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValueError("contrast must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0.0 <= self.chroma <= 1.0:
            raise ValueError("chroma must lie in [0, 1]")

    @property
    def separable_threshold(self) -> float:
        return 1.0 - 1.0 / self.class_count


def _signed_distance(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Approximate signed distance (pixels, negative inside) in shape-local coordinates."""
    if shape == "disk":
        return np.hypot(u, v) - r
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) - 0.8 * r
    if shape == "diamond":
        return (np.abs(u) + np.abs(v)) / np.sqrt(2) - 0.75 * r
    if shape == "ring":
        return np.abs(np.hypot(u, v) - 0.75 * r) - 0.25 * r
    if shape == "cross":
        arm = np.minimum(np.maximum(np.abs(u) - r, np.abs(v) - 0.3 * r),
                         np.maximum(np.abs(v) - r, np.abs(u) - 0.3 * r))
        return arm
    if shape == "xshape":
        a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        return np.minimum(np.maximum(np.abs(a) - r, np.abs(b) - 0.28 * r),
                          np.maximum(np.abs(b) - r, np.abs(a) - 0.28 * r))
    if shape == "bar":
        return np.maximum(np.abs(u) - r, np.abs(v) - 0.35 * r)
    if shape == "triangle":
        # equilateral, pointing up (v grows downward), circumradius r
        k = np.sqrt(3) / 2
        return np.maximum(v, np.maximum(k * u - 0.5 * v, -k * u - 0.5 * v)) - 0.5 * r
    raise ValueError(f"unknown shape {shape!r}")


def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth noise in [-1, 1]: bilinear upsampling of a coarse random grid."""
    coarse = rng.uniform(-1, 1, size=(5, 5))
    t = np.linspace(0, 4, size)
    i0 = np.minimum(t.astype(int), 3)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _composite(rng: np.random.Generator, label: int, spec: SynthSpec, color: np.ndarray,
               base: float) -> np.ndarray:
    n = spec.size
    radius = rng.uniform(0.22, 0.36) * n
    cx, cy = rng.uniform(radius, n - radius, size=2)
    angle = rng.uniform(-np.pi / 8, np.pi / 8)
    texture = 0.5 * _value_noise(rng, n) + 0.5 * rng.uniform(-1, 1, size=(n, n))
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    du, dv = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * du + s * dv, -s * du + c * dv
    alpha = np.clip(0.5 - _signed_distance(SHAPES[label], u, v, radius), 0.0, 1.0)[..., None]
    background = np.clip(base + spec.noise * texture, 0.0, 1.0)[..., None] * np.ones(3)
    img = (1 - alpha) * background + alpha * color
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_sample(rng: np.random.Generator, label: int, spec: SynthSpec) -> np.ndarray:
    if spec.recipe == "silhouettes":
        hue, sat, val = rng.uniform(), rng.uniform(0.0, spec.chroma), rng.uniform(0.55, 1.0)
        color = np.array(colorsys.hsv_to_rgb(hue, sat, val))
        return _composite(rng, label, spec, color, rng.uniform(0.0, 0.45))
    hue = (label / spec.class_count + (1.0 - spec.contrast) * rng.uniform(-0.5, 0.5)) % 1.0
    sat, val = rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)
    color = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    return _composite(rng, label, spec, color, rng.uniform(0.25, 0.75))


def synth_dataset(spec: SynthSpec) -> Dataset:
    """Deterministic class-balanced synthetic dataset (labels interleaved by class)."""
    spec.validate()
    seq = np.random.SeedSequence([spec.seed, spec.class_count, spec.size])
    n = spec.class_count * spec.per_class
    labels = np.arange(n, dtype=np.int64) % spec.class_count
    children = seq.spawn(n)
    images = np.stack([render_sample(np.random.default_rng(ch), int(lab), spec)
                       for ch, lab in zip(children, labels)])
    return Dataset(images, labels, spec.class_count)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def batches(dataset: Dataset | int, batch_size: int, epoch_seed: int, drop_last: bool = True) -> list[np.ndarray]:
    """Seeded permutation of sample indices cut into batches."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if drop_last and batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n} with drop_last")
    order = np.random.default_rng(epoch_seed).permutation(n)
    stop = n - n % batch_size if drop_last else n
    return [order[i : i + batch_size] for i in range(0, stop, batch_size)]


def iter_images(dataset: Dataset, idx: Iterable[int]) -> np.ndarray:
    return dataset.images[np.asarray(list(idx))]
