"""Dataset loading, synthetic tasks, deterministic variants and batching."""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

VARIANTS = ("rotate90", "pixel-permute", "invert", "channel-drop", "label-remap")
SYNTHETIC = {"shapes4": 4, "shapes2": 2}


class DataError(ValueError):
    pass


def child_seed(seed: int, tag: str) -> int:
    """Derive an independent, stable seed from (seed, tag)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "data"
    num_classes: int = 10
    split: str = "train"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {images.shape}")
        if len(images) != len(labels):
            raise DataError("image and label counts differ")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in 0..{self.num_classes - 1}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       split=self.split if split is None else split)


# --------------------------------------------------------------------------
# binary formats


def _read_idx(path, expected_magic: int, what: str) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataError(f"{what}: truncated header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise DataError(f"{what}: bad magic 0x{magic:08x} (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise DataError(f"{what}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    n = int(np.prod(dims))
    body = data[4 + 4 * ndim:]
    if len(body) < n:
        raise DataError(f"{what}: truncated, expected {n} bytes of data, found {len(body)}")
    if len(body) > n:
        raise DataError(f"{what}: {len(body) - n} trailing bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx", split: str = "train",
             num_classes: int = 10) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"dim mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    if len(labels) and int(labels.max()) >= num_classes:
        raise DataError(f"label {int(labels.max())} >= {num_classes}")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(x, labels.astype(np.int64), name, num_classes, split)


def load_cifar_bin(path, name: str = "cifar10", split: str = "train") -> LabeledDataset:
    """Read a CIFAR-10 binary batch: 1 label byte + R, G, B 32x32 planes per record."""
    data = Path(path).read_bytes()
    if len(data) == 0:
        raise DataError("empty file: N=0")
    if len(data) % CIFAR_RECORD:
        raise DataError(f"file size {len(data)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DataError(f"label {int(labels.max())} >= 10")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(x, labels, name, 10, split)


def write_idx(images_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 arrays as IDX files (used for fixtures and exports)."""
    im = np.asarray(images_u8, dtype=np.uint8)
    lb = np.asarray(labels_u8, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">III", *im.shape) + im.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", lb.shape[0]) + lb.tobytes())


# --------------------------------------------------------------------------
# synthetic shapes


def _draw_shape(img: np.ndarray, rng, square: bool, filled: bool) -> None:
    size = img.shape[0]
    r = rng.uniform(5.0, 10.0)
    cy, cx = rng.uniform(r + 1, size - r - 2, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if square:
        dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
    else:
        dist = np.hypot(yy - cy, xx - cx)
    mask = dist <= r
    if not filled:
        mask &= dist > r - 2.0
    img[mask] = rng.uniform(0.7, 1.0)


def gen_synthetic(task: str, n: int, seed: int, size: int = 28) -> LabeledDataset:
    """Procedural square/circle images with pixel noise (sigma 0.05).

    ``shapes4`` labels: 0 filled square, 1 hollow square, 2 filled circle,
    3 hollow circle.  ``shapes2`` asks only filled (0) vs hollow (1); the
    outline kind is drawn at random.
    """
    if task not in SYNTHETIC:
        raise DataError(f"unknown synthetic task {task!r}")
    k = SYNTHETIC[task]
    if n < k:
        raise DataError(f"n={n} is smaller than the class count {k}")
    rng = np.random.default_rng(child_seed(seed, task))
    labels = rng.permutation(np.arange(n) % k)
    images = np.zeros((n, 1, size, size))
    for i, y in enumerate(labels):
        if task == "shapes4":
            square, filled = y < 2, y % 2 == 0
        else:
            square, filled = bool(rng.integers(2)), y == 0
        _draw_shape(images[i, 0], rng, square, filled)
    images += rng.normal(0.0, 0.05, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return LabeledDataset(images, labels, task, k, "train")


# --------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class VariantSpec:
    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise DataError(f"unknown variant {self.kind!r}")


def apply_variant(ds: LabeledDataset, spec: VariantSpec) -> LabeledDataset:
    x, y = ds.images, ds.labels
    n, c, h, w = x.shape
    if spec.kind == "invert":
        out = 1.0 - x
    elif spec.kind == "rotate90":
        if h != w:
            raise DataError("rotate90 needs square images")
        out = np.rot90(x, k=1, axes=(2, 3))
    elif spec.kind == "pixel-permute":
        perm = np.random.default_rng(child_seed(spec.seed, "pixel-permute")).permutation(h * w)
        out = x.reshape(n, c, h * w)[:, :, perm].reshape(n, c, h, w)
    elif spec.kind == "channel-drop":
        if c < 2:
            raise DataError("channel-drop needs at least 2 channels")
        out = x.copy()
        out[:, spec.seed % c] = 0.0
    else:
        perm = np.random.default_rng(child_seed(spec.seed, "label-remap")).permutation(ds.num_classes)
        return replace(ds, labels=perm[y], name=f"{ds.name}+label-remap")
    return replace(ds, images=np.ascontiguousarray(out), name=f"{ds.name}+{spec.kind}")


# --------------------------------------------------------------------------
# batching and splits


def batch_iter(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled index batches keyed by (seed, epoch); the short tail is kept."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(epoch)]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int):
    order = np.random.default_rng(child_seed(seed, "split")).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(order[n_test:]), "train"), ds.subset(np.sort(order[:n_test]), "test")


def take(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Deterministic subsample of ``n`` points (all points if n >= N)."""
    if n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(child_seed(seed, "take")).choice(len(ds), n, replace=False))
    return ds.subset(idx)


# --------------------------------------------------------------------------
# named datasets


IDX_FILES = {
    "mnist": ("{split}-images-idx3-ubyte", "{split}-labels-idx1-ubyte"),
    "fashion-mnist": ("{split}-images-idx3-ubyte", "{split}-labels-idx1-ubyte"),
}


def data_root(override=None) -> Path | None:
    root = override or os.environ.get("ROBUSTLENS_DATA")
    return Path(root) if root else None


def load_named(spec: str, split: str, n: int, seed: int, root=None) -> LabeledDataset:
    """Resolve ``name[+variant[+variant...]]``.

    Synthetic tasks are generated with a split-specific seed.  IDX datasets
    live under ``<root>/<name>/`` with the usual ``train``/``t10k`` prefixes.
    """
    name, *variants = spec.split("+")
    if name in SYNTHETIC:
        ds = gen_synthetic(name, n, child_seed(seed, f"{name}/{split}"))
        ds = replace(ds, split=split)
    elif name in IDX_FILES:
        base = data_root(root)
        if base is None:
            raise DataError(f"{name}: no data root (set ROBUSTLENS_DATA or pass a data dir)")
        prefix = "train" if split == "train" else "t10k"
        ipat, lpat = IDX_FILES[name]
        ds = load_idx(base / name / ipat.format(split=prefix), base / name / lpat.format(split=prefix),
                      name=name, split=split)
        ds = take(ds, n, child_seed(seed, f"{name}/{split}"))
    elif name == "cifar10":
        base = data_root(root)
        if base is None:
            raise DataError("cifar10: no data root")
        fname = "test_batch.bin" if split == "test" else "data_batch_1.bin"
        ds = take(load_cifar_bin(base / "cifar10" / fname, split=split), n,
                  child_seed(seed, f"cifar10/{split}"))
    else:
        raise DataError(f"unknown dataset {name!r}")
    for v in variants:
        ds = apply_variant(ds, VariantSpec(v, seed=0))
    return replace(ds, name=spec)
