"""Synthetic mixtures, MNIST IDX ingestion and labelled-subset sampling."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .nn import load_params, save_params

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

SYNTH_KINDS = ("gaussian-grid", "two-rings", "pinwheel", "bernoulli-pixels")


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (N, d)
    labels: np.ndarray | None = None
    name: str = ""
    value_range: tuple = (-1.0, 1.0)
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError(f"dataset matrix must be 2-D, got shape {self.x.shape}")
        lo, hi = self.value_range
        if self.x.size and (self.x.min() < lo or self.x.max() > hi):
            raise ValueError(f"values escape declared range [{lo}, {hi}]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.x),):
                raise ValueError("one label per sample required")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        if "n_classes" in self.meta:
            return int(self.meta["n_classes"])
        return int(self.labels.max()) + 1 if self.labels is not None else 0


# ------------------------------------------------------------------ synthetic


def _class_sizes(n, k):
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    return sizes


def _to_unit_box(x, margin=0.95):
    return x * (margin / np.max(np.abs(x)))


def _gaussian_grid(k, sizes, rng, std=0.05):
    side = int(np.ceil(np.sqrt(k)))
    centers = np.array([(i % side, i // side) for i in range(k)], dtype=float)
    centers = centers - centers.mean(axis=0)
    return [centers[j] + std * rng.standard_normal((s, 2)) for j, s in enumerate(sizes)]


def _two_rings(k, sizes, rng, radii=(1.0, 4.0), noise=0.15, spacing=10.0):
    if k % 2:
        raise ValueError("two-rings needs an even number of clusters (concentric pairs)")
    pairs = k // 2
    offsets = (np.arange(pairs) - (pairs - 1) / 2.0) * spacing
    parts = []
    for j, s in enumerate(sizes):
        r = radii[j % 2] + noise * rng.standard_normal(s)
        t = rng.uniform(0.0, 2.0 * np.pi, s)
        pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        pts[:, 0] += offsets[j // 2]
        parts.append(pts)
    return parts


def _pinwheel(k, sizes, rng, radial_std=0.3, tangential_std=0.05, rate=0.25):
    parts = []
    for j, s in enumerate(sizes):
        base = np.stack([rng.standard_normal(s) * radial_std + 1.0, rng.standard_normal(s) * tangential_std], axis=1)
        angle = 2 * np.pi * j / k + rate * np.exp(base[:, 0])
        rot = np.stack([np.cos(angle), -np.sin(angle), np.sin(angle), np.cos(angle)], axis=1).reshape(-1, 2, 2)
        parts.append(np.einsum("nij,nj->ni", rot, base))
    return parts


def _bar_image(side, orientation, pos, width):
    """Anti-aliased bar covering [pos, pos + width) along one axis of a side×side grid."""
    cells = np.arange(side, dtype=float)
    cover = np.clip(np.minimum(cells + 1.0, pos + width) - np.maximum(cells, pos), 0.0, 1.0)
    if orientation == "h":
        return np.repeat(cover[:, None], side, axis=1)
    if orientation == "v":
        return np.repeat(cover[None, :], side, axis=0)
    raise ValueError(orientation)


BAR_SHAPES = ("h", "v", "hv", "box")


def _bernoulli_pixels(k, sizes, rng, side=8, width=2.0, flip=0.02, span=None):
    """Per-class stroke templates at a random continuous offset, sampled as Bernoulli pixels.

    Class j draws a shape (horizontal bar, vertical bar, cross, hollow box), a
    uniform offset, renders anti-aliased pixel probabilities, then each pixel is
    on with that probability (flipped with probability ``flip``). ``span``
    limits the offset to a centred window of that width (default: anywhere).
    """
    if k > len(BAR_SHAPES):
        raise ValueError(f"bernoulli-pixels supports at most {len(BAR_SHAPES)} classes")
    room = side - width
    span = room if span is None else min(float(span), room)
    lo_off = (room - span) / 2.0
    parts = []
    for j, s in enumerate(sizes):
        shape = BAR_SHAPES[j]
        imgs = np.empty((s, side, side))
        for n in range(s):
            p = lo_off + rng.uniform(0.0, span)
            q = lo_off + rng.uniform(0.0, span)
            if shape == "h":
                img = _bar_image(side, "h", p, width)
            elif shape == "v":
                img = _bar_image(side, "v", p, width)
            elif shape == "hv":
                img = np.maximum(_bar_image(side, "h", p, width), _bar_image(side, "v", q, width))
            else:
                lo = min(p, side - 2 * width - 1)
                a = _bar_image(side, "h", lo, 1.0) + _bar_image(side, "h", lo + width + 1, 1.0)
                b = _bar_image(side, "v", lo, 1.0) + _bar_image(side, "v", lo + width + 1, 1.0)
                img = np.clip(a + b, 0, 1)
            imgs[n] = img
        prob = imgs * (1 - 2 * flip) + flip
        parts.append((rng.random(prob.shape) < prob).reshape(s, -1).astype(float))
    return parts


def synth_mixture(kind: str, k: int, n: int, seed: int = 0, **kwargs) -> Dataset:
    """Seeded synthetic mixture with ground-truth labels, shuffled."""
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if n < 10 * k:
        raise ValueError(f"need at least 10 samples per cluster (N={n}, K={k})")
    rng = np.random.default_rng(seed)
    sizes = _class_sizes(n, k)
    maker = {
        "gaussian-grid": _gaussian_grid,
        "two-rings": _two_rings,
        "pinwheel": _pinwheel,
        "bernoulli-pixels": _bernoulli_pixels,
    }[kind]
    parts = maker(k, sizes, rng, **kwargs)
    x = np.concatenate(parts)
    y = np.repeat(np.arange(k), sizes)
    order = rng.permutation(n)
    x, y = x[order], y[order]
    if kind == "bernoulli-pixels":
        value_range = (0.0, 1.0)
    else:
        x = _to_unit_box(x)
        value_range = (-1.0, 1.0)
    return Dataset(x, y, kind, value_range, seed, {"n_classes": k})


# ------------------------------------------------------------------ IDX


def _open(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str):
    if len(raw) < 8:
        raise DataFormatError(f"{what}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - hdr < n:
        raise DataFormatError(f"{what}: payload truncated ({len(raw) - hdr} of {n} bytes)")
    if len(raw) - hdr > n:
        raise DataFormatError(f"{what}: {len(raw) - hdr - n} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr, count=n).reshape(dims)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 images (N, H, W) and labels (N,) in IDX format (gzipped if path ends in .gz)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes()
    lab = struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        if path.suffix == ".gz":
            blob = gzip.compress(blob, mtime=0)
        path.write_bytes(blob)


def downsample2(images: np.ndarray) -> np.ndarray:
    """2×2 mean pooling of (N, H, W) images with even H and W."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1] % 2 or images.shape[2] % 2:
        raise ValueError(f"need (N, even H, even W) images, got {images.shape}")
    return _kernels.mean_pool2(images)


def load_idx(images_path, labels_path, classes=None, downsample=False, per_class=None) -> Dataset:
    """Parse an IDX image/label pair into a [0, 1]-scaled dataset.

    ``classes`` keeps only those digits and relabels them 0..len-1 in the
    given order; ``per_class`` keeps the first that-many samples of each.
    """
    images = _parse_idx(_open(images_path), IMAGE_MAGIC, "images")
    labels = _parse_idx(_open(labels_path), LABEL_MAGIC, "labels")
    if images.ndim != 3:
        raise DataFormatError(f"images: expected 3 dimensions, got {images.ndim}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise DataFormatError(f"count mismatch: {len(images)} images vs {labels.shape[0]} labels")
    labels = labels.astype(np.int64)
    keep = np.arange(len(labels))
    if classes is not None:
        classes = [int(c) for c in classes]
        keep = keep[np.isin(labels, classes)]
    if per_class is not None:
        chosen = []
        for c in np.unique(labels[keep]):
            chosen.extend(keep[labels[keep] == c][:per_class])
        keep = np.sort(np.array(chosen, dtype=np.int64))
    x = images[keep].astype(np.float64) / 255.0
    y = labels[keep]
    if classes is not None:
        remap = {c: i for i, c in enumerate(classes)}
        y = np.array([remap[v] for v in y], dtype=np.int64)
    if downsample:
        x = downsample2(x)
    n_classes = len(classes) if classes is not None else 10
    return Dataset(
        x.reshape(len(x), -1),
        y,
        "idx",
        (0.0, 1.0),
        None,
        {"n_classes": n_classes, "image_shape": list(x.shape[1:])},
    )


# ------------------------------------------------------------------ semi-supervision


def sample_labeled_subset(dataset: Dataset, m: int, seed: int = 0):
    """Class-balanced labelled indices: floor(m/K) per class, remainder by seeded draw."""
    if dataset.labels is None:
        raise ValueError("dataset has no ground-truth labels")
    n = len(dataset)
    if m > n or m < 0:
        raise ValueError(f"cannot label {m} of {n} samples")
    if m == n:
        idx = np.arange(n)
        return idx, dataset.labels[idx]
    k = dataset.n_classes
    rng = np.random.default_rng(seed)
    per = np.full(k, m // k)
    per[rng.choice(k, size=m % k, replace=False)] += 1
    chosen = []
    short = []
    for c in range(k):
        pool = np.flatnonzero(dataset.labels == c)
        if len(pool) < per[c]:
            short.append(c)
            continue
        chosen.append(rng.choice(pool, size=per[c], replace=False))
    if short:
        raise ValueError(f"classes {short} have too few samples for {m} labels")
    idx = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)
    return idx, dataset.labels[idx]


# ------------------------------------------------------------------ cache


def save_dataset(ds: Dataset) -> bytes:
    tensors = {"x": ds.x}
    if ds.labels is not None:
        tensors["labels"] = ds.labels.astype(np.float64)
    meta = {"name": ds.name, "value_range": list(ds.value_range), "seed": ds.seed, "meta": ds.meta, "kind": "dataset"}
    return save_params(tensors, meta)


def load_dataset(blob: bytes) -> Dataset:
    tensors, meta = load_params(blob)
    if meta.get("kind") != "dataset":
        raise DataFormatError("checkpoint does not hold a dataset")
    labels = tensors.get("labels")
    return Dataset(
        tensors["x"],
        None if labels is None else labels.astype(np.int64),
        meta["name"],
        tuple(meta["value_range"]),
        meta["seed"],
        meta["meta"],
    )
