"""Datasets, augmentation, stratified folds and batching.

Images are held as ``h x w x c`` float32 arrays scaled to [0, 1]. Every random
choice is drawn from a generator seeded by a fixed tuple of integers, so the
same seeds give the same samples regardless of how work is scheduled.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import ntf

BUILTIN_FIXTURES = ("synthetic-stripes", "synthetic-multi")


class DataError(RuntimeError):
    pass


@dataclass
class DatasetIndex:
    classes: list[str]
    images: np.ndarray
    labels: np.ndarray
    source: str
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise DataError("class ids out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.images, self.labels.tolist()))

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


# -- loading -----------------------------------------------------------------

def _resize(img: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of an h x w x c array in [0, 1], channel by channel."""
    if img.shape[0] == side and img.shape[1] == side:
        return img.astype(np.float32)
    chans = [np.asarray(Image.fromarray(img[:, :, c].astype(np.float32), mode="F")
                        .resize((side, side), Image.BILINEAR)) for c in range(img.shape[2])]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0).astype(np.float32)


def _fit_channels(img: np.ndarray, channels: int, origin: str) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DataError(f"{origin}: expected a 2-D or 3-D image, got shape {img.shape}")
    have = img.shape[2]
    if have == channels:
        return img
    if have == 1 and channels == 3:
        return np.repeat(img, 3, axis=2)
    if have == 3 and channels == 1:
        return (img @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[:, :, None]
    raise DataError(f"{origin}: cannot convert {have} channels to {channels}")


def prepare_raw(arr: np.ndarray, side: int, channels: int, origin: str = "tensor") -> np.ndarray:
    img = _fit_channels(np.clip(np.asarray(arr, dtype=np.float32), 0.0, 1.0), channels, origin)
    return _resize(img, side)


def _decode_image(path: Path, side: int, channels: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            im = im.resize((side, side), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    arr = arr.astype(np.float32) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def _load_file(path: Path, side: int, channels: int) -> np.ndarray:
    if path.suffix.lower() == ".ntf":
        try:
            tensors = ntf.load(path)
        except ntf.NTFError as exc:
            raise DataError(f"cannot read raw tensor {path}: {exc}") from exc
        if len(tensors) != 1:
            raise DataError(f"raw tensor file {path} must hold exactly one tensor")
        return prepare_raw(next(iter(tensors.values())), side, channels, str(path))
    return _decode_image(path, side, channels)


def load_ntf_dataset(path, target_side: int, channels: int = 3) -> DatasetIndex:
    """Dataset stored as one NTF file: samples ``s0, s1, ...`` plus ``labels``."""
    path = Path(path)
    try:
        tensors = ntf.load(path)
    except ntf.NTFError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if "labels" not in tensors:
        raise DataError(f"{path}: missing 'labels' tensor")
    labels = tensors["labels"].reshape(-1)
    if not np.all(labels == np.round(labels)) or labels.size == 0 or labels.min() < 0:
        raise DataError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.int64)
    images = []
    for i in range(labels.size):
        key = f"s{i}"
        if key not in tensors:
            raise DataError(f"{path}: missing sample tensor {key!r}")
        images.append(prepare_raw(tensors[key], target_side, channels, f"{path}:{key}"))
    count = int(labels.max()) + 1
    if count < 2:
        raise DataError(f"{path}: dataset has a single class")
    width = len(str(count - 1))
    classes = [f"class_{i:0{width}d}" for i in range(count)]
    ds = DatasetIndex(classes, np.stack(images), labels, str(path))
    empty = [c for c, n in zip(classes, ds.class_sizes()) if n == 0]
    if empty:
        raise DataError(f"{path}: classes without samples: {empty}")
    return ds


def load_dataset(root, target_side: int, channels: int = 3) -> DatasetIndex:
    """Load a ``root/<class>/<image>`` tree (or a single NTF dataset file)."""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    root = Path(root)
    if root.is_file():
        return load_ntf_dataset(root, target_side, channels)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if len(class_dirs) < 2:
        raise DataError(f"dataset root {root} needs at least 2 class folders, found {len(class_dirs)}")
    images, labels, paths = [], [], []
    for cid, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and not p.name.startswith("."))
        if not files:
            raise DataError(f"class folder {cdir} holds no images")
        for f in files:
            images.append(_load_file(f, target_side, channels))
            labels.append(cid)
            paths.append(str(f))
    return DatasetIndex([p.name for p in class_dirs], np.stack(images), np.array(labels), str(root), paths)


# -- builtin fixtures --------------------------------------------------------

def _pattern(rng, side: int, orientation: str) -> np.ndarray:
    period = int(rng.integers(4, 9))
    phase = rng.uniform(0, period)
    lo = rng.uniform(0.0, 0.3)
    hi = rng.uniform(0.6, 1.0)
    r, c = np.mgrid[0:side, 0:side].astype(np.float64)
    coord = {"horizontal": r, "vertical": c, "diagonal": r + c, "antidiagonal": r - c}[orientation]
    if orientation in ("diagonal", "antidiagonal"):
        coord = coord / math.sqrt(2)
    bars = ((coord + phase) % period) < period / 2
    img = np.where(bars, hi, lo) + rng.normal(0, 0.1, (side, side))
    return np.clip(img, 0, 1)


def synthetic_dataset(name: str, n_samples: int = 2000, side: int = 32, channels: int = 3,
                      seed: int = 0) -> DatasetIndex:
    """Oriented bar patterns: two classes for stripes, four for multi."""
    if name == "synthetic-stripes":
        classes = ["horizontal", "vertical"]
    elif name == "synthetic-multi":
        classes = ["antidiagonal", "diagonal", "horizontal", "vertical"]
    else:
        raise DataError(f"unknown builtin fixture {name!r}; expected one of {BUILTIN_FIXTURES}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(classes), side]))
    labels = np.arange(n_samples) % len(classes)
    rng.shuffle(labels)
    images = np.empty((n_samples, side, side, channels), dtype=np.float32)
    for i, y in enumerate(labels):
        images[i] = _pattern(rng, side, classes[y])[:, :, None]
    return DatasetIndex(classes, images, labels, name)


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.05
    rotation_max_deg: float = 20.0
    h_flip: bool = True
    v_flip: bool = True
    shift_max_frac: float = 0.1
    fill_value: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.rotation_max_deg < 0:
            raise ValueError("noise_sigma and rotation_max_deg must be non-negative")
        if not 0 <= self.shift_max_frac < 1:
            raise ValueError("shift_max_frac must lie in [0, 1)")
        if not 0 <= self.fill_value <= 1:
            raise ValueError("fill_value must lie in [0, 1]")

    @classmethod
    def disabled(cls, master_seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, False, False, 0.0, 0.0, master_seed)


def sample_rng(master_seed: int, epoch: int, idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, epoch, idx]))


def gaussian_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    noise = rng.normal(0.0, sigma, size=x.shape)
    return np.clip(x + noise, 0.0, 1.0).astype(x.dtype)


def rotate(x: np.ndarray, degrees: float, fill: float = 0.0) -> np.ndarray:
    """Counter-clockwise rotation about the image center with bilinear sampling."""
    if degrees % 360 == 0:
        return x.copy()
    h, w = x.shape[:2]
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    y, xo = yy - cy, xx - cx
    sy = sin * xo + cos * y + cy
    sx = cos * xo - sin * y + cx
    # bilinear on a fill-padded copy so border pixels blend towards the fill
    padded = np.pad(x.astype(np.float64), ((1, 1), (1, 1), (0, 0)), constant_values=fill)
    py, px = sy + 1, sx + 1
    inside = (py >= 0) & (py <= h + 1) & (px >= 0) & (px <= w + 1)
    py = np.clip(py, 0, h + 1)
    px = np.clip(px, 0, w + 1)
    y0 = np.minimum(np.floor(py).astype(int), h)
    x0 = np.minimum(np.floor(px).astype(int), w)
    fy = (py - y0)[..., None]
    fx = (px - x0)[..., None]
    out = ((1 - fy) * (1 - fx) * padded[y0, x0] + (1 - fy) * fx * padded[y0, x0 + 1]
           + fy * (1 - fx) * padded[y0 + 1, x0] + fy * fx * padded[y0 + 1, x0 + 1])
    out[~inside] = fill
    return out.astype(x.dtype)


def flip(x: np.ndarray, axis: str) -> np.ndarray:
    if axis == "horizontal":
        return x[:, ::-1].copy()
    if axis == "vertical":
        return x[::-1].copy()
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def shift(x: np.ndarray, dy: int, dx: int, fill: float = 0.0) -> np.ndarray:
    h, w = x.shape[:2]
    if abs(dy) > h or abs(dx) > w:
        raise ValueError(f"shift ({dy}, {dx}) exceeds image extents {h}x{w}")
    out = np.full_like(x, fill)
    src = x[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def augment_sample(x: np.ndarray, cfg: AugmentConfig, epoch: int, idx: int) -> np.ndarray:
    """Noise, rotation, flips, shifts in that order, from a per-sample generator."""
    rng = sample_rng(cfg.master_seed, epoch, idx)
    h, w = x.shape[:2]
    # draws happen unconditionally so enabling one transform never reshuffles another
    sigma = rng.uniform(0.0, cfg.noise_sigma)
    noise_rng = np.random.default_rng(rng.integers(2**63))
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    do_h = rng.random() < 0.5
    do_v = rng.random() < 0.5
    my, mx = int(cfg.shift_max_frac * h), int(cfg.shift_max_frac * w)
    dy = int(rng.integers(-my, my + 1))
    dx = int(rng.integers(-mx, mx + 1))

    out = x
    if cfg.noise_sigma > 0:
        out = gaussian_noise(out, sigma, noise_rng)
    if angle != 0:
        out = rotate(out, angle, cfg.fill_value)
    if cfg.h_flip and do_h:
        out = flip(out, "horizontal")
    if cfg.v_flip and do_v:
        out = flip(out, "vertical")
    if dy or dx:
        out = shift(out, dy, dx, cfg.fill_value)
    return np.clip(out, 0.0, 1.0).astype(np.float32) if out is not x else x.copy()


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MPNET_THREADS", "1")))
    except ValueError:
        return 1


def augment_batch(images: np.ndarray, indices, cfg: AugmentConfig | None, epoch: int,
                  workers: int = 1) -> np.ndarray:
    indices = [int(i) for i in indices]
    if cfg is None:
        return images[indices].copy()
    if workers <= 1:
        out = [augment_sample(images[i], cfg, epoch, i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda i: augment_sample(images[i], cfg, epoch, i), indices))
    return np.stack(out)


# -- folds and batches -------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def stratified_kfold(ds: DatasetIndex, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle each class, then deal its samples round-robin across folds.

    The dealing position carries over from one class to the next so fold
    totals also stay within one of each other.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = np.asarray(ds.labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
    assignments = np.full(labels.size, -1, dtype=np.int64)
    cursor = 0
    for cid, name in enumerate(ds.classes):
        members = np.flatnonzero(labels == cid)
        if members.size < k:
            raise DataError(f"class {name!r} has {members.size} samples, fewer than k={k}")
        members = members[rng.permutation(members.size)]
        assignments[members] = (cursor + np.arange(members.size)) % k
        cursor = (cursor + members.size) % k
    return FoldPlan(k, assignments)


def inner_split(indices, labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train, validation) split of ``indices``."""
    indices = np.asarray(indices)
    if fraction <= 0:
        return np.sort(indices), np.array([], dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    val = []
    labels = np.asarray(labels)[indices]
    for cid in np.unique(labels):
        members = indices[labels == cid]
        members = members[rng.permutation(members.size)]
        val.append(members[:int(round(fraction * members.size))])
    val = np.sort(np.concatenate(val)).astype(np.int64)
    train = np.setdiff1d(indices, val)
    return train, val


def make_batches(indices, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    indices = np.asarray(indices, dtype=np.int64)
    order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(indices.size)
    shuffled = indices[order]
    return [shuffled[i:i + batch_size] for i in range(0, shuffled.size, batch_size)]
