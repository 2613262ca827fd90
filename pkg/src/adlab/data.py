"""Dataset generation and loading.

Synthetic datasets (Gaussian mixtures and concentric rings) carry a hard
class margin: no cross-class pair of points is closer than ``class_margin``.
IDX image/label files are supported for externally supplied data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATASET_KINDS = ("gaussian-mixture", "concentric", "idx-image")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    dims: int = 2
    classes: int = 2
    samples_per_class: int = 100
    class_margin: float = 0.1
    images_path: str | None = None
    labels_path: str | None = None
    normalize_to: tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    split: float = 0.8

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.normalize_to[0] >= self.normalize_to[1]:
            raise ConfigError("normalize_to must satisfy lo < hi")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split fraction must be in (0, 1)")
        if self.kind != "idx-image":
            if self.class_margin <= 0:
                raise ConfigError("class_margin must be > 0")
            if self.dims < 1 or self.classes < 2 or self.samples_per_class < 1:
                raise ConfigError("dims/classes/samples_per_class invalid")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    feature_box: tuple[float, float]
    margin: float | None = None  # None for externally loaded data

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]


def _split(x, y, fraction, rng) -> tuple:
    n = x.shape[0]
    perm = rng.permutation(n)
    n_train = int(round(fraction * n))
    tr, te = perm[:n_train], perm[n_train:]
    return x[tr], y[tr], x[te], y[te]


def _place_means(rng, spec: DatasetSpec, radius):
    """Rejection-sample class means with pairwise separation 2r + margin,
    keeping every cluster inside the normalized box."""
    lo, hi = spec.normalize_to
    inner_lo, inner_hi = lo + radius, hi - radius
    if inner_lo >= inner_hi:
        raise ConfigError("class_margin too large for the feature box")
    sep = 2 * radius + spec.class_margin
    for _ in range(10_000):
        means = rng.uniform(inner_lo, inner_hi, size=(spec.classes, spec.dims))
        d = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() >= sep:
            return means
    raise ConfigError("could not place class means; reduce class_margin")


def _gaussian_mixture(rng, spec: DatasetSpec):
    radius = spec.class_margin  # cluster radius; separation handled above
    means = _place_means(rng, spec, radius)
    xs, ys = [], []
    for c in range(spec.classes):
        pts = rng.normal(scale=radius / 3.0,
                         size=(spec.samples_per_class, spec.dims))
        # fold points outside the cluster radius back inside
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        too_far = norms > radius
        pts = np.where(too_far, pts * (radius / norms), pts)
        xs.append(means[c] + pts)
        ys.append(np.full(spec.samples_per_class, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _concentric(rng, spec: DatasetSpec):
    lo, hi = spec.normalize_to
    center = (lo + hi) / 2.0
    band = spec.class_margin  # radial band width per class
    max_r = spec.classes * (band + spec.class_margin)
    if max_r > (hi - lo) / 2.0:
        raise ConfigError("concentric rings do not fit the feature box")
    xs, ys = [], []
    for c in range(spec.classes):
        r_lo = c * (band + spec.class_margin) + (band if c > 0 else 0.0)
        radii = rng.uniform(r_lo, r_lo + band, size=spec.samples_per_class)
        dirs = rng.normal(size=(spec.samples_per_class, spec.dims))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        xs.append(center + radii[:, None] * dirs)
        ys.append(np.full(spec.samples_per_class, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def gen_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic synthetic dataset with a guaranteed class margin."""
    if spec.kind == "idx-image":
        return load_idx(spec.images_path, spec.labels_path,
                        normalize_to=spec.normalize_to, split=spec.split,
                        seed=spec.seed)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian-mixture":
        x, y = _gaussian_mixture(rng, spec)
    else:
        x, y = _concentric(rng, spec)
    lo, hi = spec.normalize_to
    x = np.clip(x, lo, hi)
    xtr, ytr, xte, yte = _split(x, y, spec.split, rng)
    return Dataset(xtr, ytr, xte, yte, n_classes=spec.classes,
                   feature_box=spec.normalize_to, margin=spec.class_margin)


def min_cross_class_distance(x, y) -> float:
    """Exhaustive nearest cross-class pair distance (margin oracle)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    best = np.inf
    for c in np.unique(y):
        a, b = x[y == c], x[y != c]
        if a.size == 0 or b.size == 0:
            continue
        d = np.linalg.norm(a[:, None] - b[None, :], axis=-1)
        best = min(best, float(d.min()))
    return best


# -- IDX binary format ------------------------------------------------------


def _read_idx_array(path, expect_magic):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expect_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, "
                          f"expected 0x{expect_magic:08x}", offset=0)
    n_dims = magic & 0xFF
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension table", offset=len(raw))
    dims = struct.unpack_from(f">{n_dims}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise FormatError(
            f"{path}: payload is {len(raw) - header} bytes, expected {count}",
            offset=header)
    data = np.frombuffer(raw, dtype=np.uint8, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path, normalize_to=(0.0, 1.0), split=0.8,
             seed=0) -> Dataset:
    """Load IDX image/label files, scale pixels into ``normalize_to`` and
    flatten images to feature vectors."""
    if images_path is None or labels_path is None:
        raise ConfigError("idx-image datasets need images_path and labels_path")
    images = _read_idx_array(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx_array(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images vs "
                          f"{labels.shape[0]} labels")
    lo, hi = normalize_to
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    x = lo + x * (hi - lo)
    y = labels.astype(np.int64)
    rng = np.random.default_rng(seed)
    xtr, ytr, xte, yte = _split(x, y, split, rng)
    return Dataset(xtr, ytr, xte, yte, n_classes=int(y.max()) + 1,
                   feature_box=(lo, hi), margin=None)


def write_idx_images(path, images: np.ndarray):
    """Write a (N, H, W) uint8 array in IDX format (round-trip counterpart of
    the loader; also used to persist generated data)."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ConfigError("images must be (N, H, W)")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ConfigError("labels must be 1-D")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", labels.shape[0]))
        f.write(labels.tobytes())


def onehot(labels, n_classes) -> np.ndarray:
    labels = np.asarray(labels)
    return np.eye(n_classes)[labels]
