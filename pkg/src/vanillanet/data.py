"""Dataset readers (IDX, CIFAR-10 binary), a synthetic generator and batching."""
from __future__ import annotations

import gzip
import os
import queue
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float in [0, 1] unless standardized
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes,
                       split or self.split, dict(self.stats))


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataFormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (MNIST layout) into a (N, 1, H, W) dataset in [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise DataFormatError(f"image count {len(images)} != label count {len(labels)}")
    x = (images.astype(np.float32) / 255.0)[:, None]
    return Dataset(x, labels.astype(np.int64), num_classes, split)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (``0x08`` type code, big-endian dims)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def load_cifar10(batch_files, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches: 1 label byte then 3072 bytes of R, G, B planes."""
    if isinstance(batch_files, (str, os.PathLike)):
        batch_files = [batch_files]
    chunks = []
    for path in batch_files:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: size {len(raw)} is not a whole number of "
                                  f"{CIFAR_RECORD}-byte records")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError("CIFAR-10 label byte out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, 10, split)


def write_cifar10(path, images_u8: np.ndarray, labels) -> None:
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, np.uint8)[:, None], images_u8], axis=1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


def find_mnist(directory, split: str = "train") -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        img = os.path.join(directory, f"{prefix}-images-idx3-ubyte{suffix}")
        lbl = os.path.join(directory, f"{prefix}-labels-idx1-ubyte{suffix}")
        if os.path.exists(img) and os.path.exists(lbl):
            return load_idx(img, lbl, split=split)
    raise FileNotFoundError(f"no {prefix} IDX files in {directory}")


def find_cifar10(directory, split: str = "train") -> Dataset:
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    paths = [os.path.join(directory, n) for n in names]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 batches: {missing}")
    return load_cifar10(paths, split)


def synthetic_blobs(num_classes: int = 10, samples: int = 1000, size: int = 32, seed: int = 0,
                    channels: int = 1, snr: float = 4.0, split: str = "train") -> Dataset:
    """Class-conditional Gaussian bumps plus white noise.

    Class ``c`` puts a bump at its own point on a circle; noise std is
    ``1 / snr`` (``snr=inf`` gives noise-free templates). Values are clipped
    to [0, 1] and the class histogram is balanced to within one sample.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    radius, sigma = size * 0.28, size * 0.12
    templates = np.empty((num_classes, channels, size, size))
    for c in range(num_classes):
        angle = 2 * np.pi * c / num_classes
        cy, cx = size / 2 + radius * np.sin(angle), size / 2 + radius * np.cos(angle)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        for ch in range(channels):
            templates[c, ch] = bump * (0.6 + 0.4 * ((c + ch) % 2))
    labels = rng.permutation(np.arange(samples) % num_classes)
    images = templates[labels]
    if np.isfinite(snr):
        images = images + rng.standard_normal(images.shape) / snr
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), num_classes, split)


def pad_to(ds: Dataset, size: int) -> Dataset:
    """Zero-pad images symmetrically to ``size x size`` (e.g. 28 -> 32 for MNIST)."""
    h, w = ds.images.shape[2:]
    if h > size or w > size:
        raise ValueError(f"cannot pad {h}x{w} images to {size}")
    top, left = (size - h) // 2, (size - w) // 2
    pad = ((0, 0), (0, 0), (top, size - h - top), (left, size - w - left))
    return Dataset(np.pad(ds.images, pad), ds.labels, ds.num_classes, ds.split, dict(ds.stats))


def channel_stats(ds: Dataset) -> dict:
    if "mean" not in ds.stats:
        ds.stats["mean"] = ds.images.mean(axis=(0, 2, 3)).tolist()
        ds.stats["std"] = ds.images.std(axis=(0, 2, 3)).tolist()
    return ds.stats


def standardize(ds: Dataset, stats: dict) -> Dataset:
    mean = np.asarray(stats["mean"], np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(stats["std"], np.float32).reshape(1, -1, 1, 1)
    out = Dataset(((ds.images - mean) / std).astype(np.float32), ds.labels, ds.num_classes, ds.split)
    out.stats = {"mean": list(stats["mean"]), "std": list(stats["std"]), "standardized": True}
    return out


def augment(batch: np.ndarray, flip_prob: float = 0.5, crop_padding: int = 0,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Random horizontal flip and random crop after zero padding; shape-preserving."""
    if flip_prob == 0 and crop_padding == 0:
        return batch
    rng = rng if rng is not None else np.random.default_rng()
    out = batch.copy()
    n, _, h, w = batch.shape
    if flip_prob > 0:
        flip = rng.random(n) < flip_prob
        out[flip] = out[flip][..., ::-1]
    if crop_padding > 0:
        p = crop_padding
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, n)
        dx = rng.integers(0, 2 * p + 1, n)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def iterate_batches(ds: Dataset, batch_size: int, shuffle: bool = False,
                    rng: np.random.Generator | None = None, drop_last: bool = False,
                    flip_prob: float = 0.0, crop_padding: int = 0):
    """Yield ``(images, labels)`` batches; file order unless ``shuffle``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = rng.permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for i in range(0, stop, batch_size):
        idx = order[i:i + batch_size]
        x = ds.images[idx]
        if flip_prob or crop_padding:
            x = augment(x, flip_prob, crop_padding, rng)
        yield x, ds.labels[idx]


_DONE = object()


def prefetch(iterable, size: int = 2):
    """Run ``iterable`` in a producer thread behind a bounded queue.

    Order is preserved, so seeded pipelines stay deterministic. ``size=0``
    disables the thread.
    """
    if size <= 0:
        yield from iterable
        return
    q: queue.Queue = queue.Queue(maxsize=size)
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        t.join(timeout=1.0)
