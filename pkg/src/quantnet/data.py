"""Dataset scanning, preprocessing, augmentation, stratified splitting,
batching, and the synthetic desk-scale dataset generator.

Dataset layout on disk is one folder per class: root/<class_name>/*.png|jpg.
Every operation is deterministic given its seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass
class DatasetIndex:
    """Ordered (path, label) pairs; labels are dense in [0, K)."""

    items: list[tuple[str, int]]
    class_names: list[str]

    def __len__(self):
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def per_class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for _, label in self.items:
            counts[label] += 1
        return counts


def scan_dataset(root) -> DatasetIndex:
    """Index a class-per-folder dataset tree, lexicographic by class then
    filename.  Unreadable images are listed (decode errors surface at load
    time); an empty class folder is an error."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class folders under {root}")
    items = []
    class_names = []
    for label, d in enumerate(class_dirs):
        class_names.append(d.name)
        files = sorted(f for f in d.iterdir()
                       if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise ValueError(f"class folder {d.name!r} contains no images")
        items.extend((str(f), label) for f in files)
    return DatasetIndex(items, class_names)


def stratified_split(index: DatasetIndex, fraction: float = 0.2,
                     seed: int = 42) -> tuple[DatasetIndex, DatasetIndex]:
    """Disjoint (train, validation) partition preserving class balance.

    Per class, floor(count * fraction) samples go to validation; remaining
    validation slots up to round(total * fraction) are assigned by largest
    remainder.  Selection within a class is a seeded shuffle."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    counts = index.per_class_counts()
    for name, count in zip(index.class_names, counts):
        if count < 2:
            raise ValueError(f"class {name!r} has {count} sample(s); need at least 2 to split")
    quotas = [int(c * fraction) for c in counts]
    remainders = [c * fraction - q for c, q in zip(counts, quotas)]
    target = int(round(len(index) * fraction))
    extra = target - sum(quotas)
    for label in sorted(range(len(counts)), key=lambda i: (-remainders[i], i))[:max(extra, 0)]:
        if quotas[label] < counts[label]:
            quotas[label] += 1

    rng = np.random.default_rng(seed)
    train_items: list[tuple[str, int]] = []
    val_items: list[tuple[str, int]] = []
    for label in range(index.num_classes):
        class_items = [it for it in index.items if it[1] == label]
        order = rng.permutation(len(class_items))
        chosen = set(order[:quotas[label]].tolist())
        for i, item in enumerate(class_items):
            (val_items if i in chosen else train_items).append(item)
    return (DatasetIndex(train_items, list(index.class_names)),
            DatasetIndex(val_items, list(index.class_names)))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Classic bilinear resampling with half-pixel centers and edge clamping."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32)
    x = img.astype(np.float64)

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fy = axis_coords(h, out_h)
    c0, c1, fx = axis_coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = x[r0][:, c0] * (1 - fx) + x[r0][:, c1] * fx
    bot = x[r1][:, c0] * (1 - fx) + x[r1][:, c1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def load_image(path) -> np.ndarray:
    """Decode to an RGB uint8 array (grayscale replicated to 3 channels)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def preprocess(image, size: int = 224) -> np.ndarray:
    """F32 (size, size, 3) tensor in [0,1]: RGB conversion, bilinear resize,
    1/255 rescale.  `image` may be a path or an HxWx3 uint8 array."""
    arr = load_image(image) if not isinstance(image, np.ndarray) else image
    resized = bilinear_resize(arr.astype(np.float32), size, size)
    return (resized / np.float32(255.0)).astype(np.float32)


@dataclass
class AugmentConfig:
    rotation_deg: float = 25.0
    flip_prob: float = 0.5
    shift_frac: float = 0.15
    zoom_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (0.8, 1.2)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), (1.0, 1.0))


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One training-time augmentation draw.

    A rotation/shift/zoom composed into a single affine warp (bilinear
    sampling, out-of-frame coordinates clamped to the nearest edge pixel),
    then a horizontal flip, then a brightness multiply clamped to [0,1].
    Parameter draw order is pinned: rotation, dy, dx, zoom, flip, brightness."""
    h, w = x.shape[:2]
    theta = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    dy = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * h
    dx = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * w
    zoom = rng.uniform(cfg.zoom_range[0], cfg.zoom_range[1])
    flip = rng.random() < cfg.flip_prob
    brightness = rng.uniform(cfg.brightness_range[0], cfg.brightness_range[1])

    out = x
    if theta != 0.0 or dy != 0.0 or dx != 0.0 or zoom != 1.0:
        out = _affine_warp(out, theta, dy, dx, zoom)
    if flip:
        out = out[:, ::-1, :]
    if brightness != 1.0:
        out = np.clip(out * np.float32(brightness), 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def _affine_warp(x: np.ndarray, theta: float, dy: float, dx: float, zoom: float) -> np.ndarray:
    """dst = zoom * R(theta) @ (src - center) + center + t, sampled inversely."""
    h, w = x.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    ry = rows - cy - dy
    rx = cols - cx - dx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_y = (cos_t * ry + sin_t * rx) / zoom + cy
    src_x = (-sin_t * ry + cos_t * rx) / zoom + cx
    src_y = np.clip(src_y, 0, h - 1)
    src_x = np.clip(src_x, 0, w - 1)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (src_y - y0)[..., None]
    fx = (src_x - x0)[..., None]
    top = x[y0, x0] * (1 - fx) + x[y0, x1] * fx
    bot = x[y1, x0] * (1 - fx) + x[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def batches(index: DatasetIndex, batch_size: int = 32, seed: int = 42,
            training: bool = False, epoch: int = 0, image_size: int = 224,
            augment_cfg: AugmentConfig | None = None, cache: dict | None = None):
    """Iterate (images, labels) mini-batches.

    Training mode reshuffles each epoch from the seed sequence and applies
    augmentation; evaluation mode keeps index order and yields pure
    preprocess output.  The last partial batch is emitted."""
    order = np.arange(len(index))
    rng = None
    if training:
        ss = np.random.SeedSequence([seed, epoch])
        rng = np.random.default_rng(ss)
        order = rng.permutation(len(index))
    cfg = augment_cfg if augment_cfg is not None else AugmentConfig()
    for start in range(0, len(index), batch_size):
        chunk = order[start:start + batch_size]
        xs = []
        ys = []
        for i in chunk:
            path, label = index.items[i]
            if cache is not None and path in cache:
                x = cache[path]
            else:
                x = preprocess(path, size=image_size)
                if cache is not None:
                    cache[path] = x
            if training:
                x = augment(x, cfg, rng)
            xs.append(x)
            ys.append(label)
        yield np.stack(xs), np.asarray(ys, dtype=np.int64)


@dataclass
class DataPipeline:
    """Train/validation feed for the train engine."""

    train_index: DatasetIndex
    val_index: DatasetIndex
    image_size: int
    batch_size: int = 32
    seed: int = 42
    augment_cfg: AugmentConfig | None = None
    cache: dict = field(default_factory=dict)
    _val_arrays: tuple | None = None

    @classmethod
    def from_directory(cls, root, image_size: int, batch_size: int = 32,
                       val_fraction: float = 0.2, seed: int = 42,
                       augment_cfg: AugmentConfig | None = None) -> "DataPipeline":
        train_idx, val_idx = stratified_split(scan_dataset(root), val_fraction, seed)
        return cls(train_idx, val_idx, image_size, batch_size, seed, augment_cfg)

    @property
    def num_classes(self) -> int:
        return self.train_index.num_classes

    @property
    def class_names(self) -> list[str]:
        return self.train_index.class_names

    def train_batches(self, epoch: int):
        use_cache = self.cache if self.image_size <= 128 else None
        return batches(self.train_index, self.batch_size, self.seed, training=True,
                       epoch=epoch, image_size=self.image_size,
                       augment_cfg=self.augment_cfg, cache=use_cache)

    def val_data(self):
        if self._val_arrays is None:
            xs, ys = [], []
            for xb, yb in batches(self.val_index, self.batch_size,
                                  image_size=self.image_size):
                xs.append(xb)
                ys.append(yb)
            self._val_arrays = (np.concatenate(xs), np.concatenate(ys))
        return self._val_arrays


# ---------------------------------------------------------------------------
# synthetic data

def synth_dataset(out_dir, classes: int, per_class: int, image_size: int = 64,
                  seed: int = 42) -> Path:
    """Procedural class-per-folder dataset for desk-scale experiments.

    Class identity is carried by geometry a small CNN can learn: blob count
    and placement, ring structure, stripe orientation.  Images are grayscale
    PNGs with per-image jitter and noise; byte-identical for a given seed."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for k in range(classes):
        class_dir = root / f"class_{k}"
        class_dir.mkdir(exist_ok=True)
        for i in range(per_class):
            img = _synth_image(k, image_size, rng)
            Image.fromarray(img, mode="L").save(class_dir / f"img_{i:04d}.png")
    return root


def _synth_image(klass: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base_level = 0.12 + 0.08 * (klass // 4)
    img = np.full((size, size), base_level) + rng.normal(0, 0.015, (size, size))

    def blob(cy, cx, radius, gain=0.9):
        return gain * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))

    kind = klass % 4
    if kind == 0:  # one large centered blob
        img += blob(rng.uniform(0.42, 0.58), rng.uniform(0.42, 0.58), rng.uniform(0.16, 0.2))
    elif kind == 1:  # two small diagonal blobs
        img += blob(rng.uniform(0.18, 0.3), rng.uniform(0.18, 0.3), rng.uniform(0.07, 0.1))
        img += blob(rng.uniform(0.7, 0.82), rng.uniform(0.7, 0.82), rng.uniform(0.07, 0.1))
    elif kind == 2:  # stripes
        freq = rng.uniform(3.5, 4.5)
        phase = rng.uniform(0, 2 * np.pi)
        img += 0.4 * (1 + np.sin(2 * np.pi * freq * yy + phase))
    else:  # thin ring, clearly hollow relative to the blob class
        cy, cx = rng.uniform(0.45, 0.55), rng.uniform(0.45, 0.55)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        r0 = rng.uniform(0.27, 0.32)
        img += 0.9 * np.exp(-((r - r0) ** 2) / (2 * 0.05 ** 2))

    img += rng.normal(0, 0.03, (size, size))
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)
