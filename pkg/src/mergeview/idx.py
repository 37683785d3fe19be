"""IDX-format ingestion (the MNIST on-disk format).

Big-endian layout: magic ``0x0000080[13]`` (third byte = element type 0x08 =
unsigned byte, fourth = rank), then one uint32 per dimension, then the raw
elements.  Gzipped files are detected by their two-byte signature and read
transparently.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np
import scipy.ndimage

from .exceptions import ContractViolationError
from .tasks import IMBALANCED_SPLIT, ClassSplitDataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ContractViolationError):
    """Malformed IDX content: bad magic, truncation, or mismatched files."""


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Read one IDX file into an array: (N, rows, cols) uint8 for images,
    (N,) uint8 for labels."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic == IMAGES_MAGIC:
        rank = 3
    elif magic == LABELS_MAGIC:
        rank = 1
    else:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{rank}i", raw[4:header])
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) != count:
        raise IdxFormatError(
            f"{path}: expected {count} bytes of data, found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray):
    """Write images (3-D) or labels (1-D) in IDX layout; gzip when the
    filename ends in .gz."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IMAGES_MAGIC
    elif array.ndim == 1:
        magic = LABELS_MAGIC
    else:
        raise IdxFormatError(f"unsupported rank {array.ndim}")
    blob = struct.pack(f">{1 + array.ndim}i", magic, *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # fixed mtime so identical arrays give identical files
        path.write_bytes(gzip.compress(blob, mtime=0))
    else:
        path.write_bytes(blob)


def _downscale(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample of (N, r, c) float images to (N, size, size)."""
    n, rows, cols = images.shape
    if (rows, cols) == (size, size):
        return images
    factors = (1.0, size / rows, size / cols)
    return scipy.ndimage.zoom(images, factors, order=1, grid_mode=True, mode="grid-constant")


def load_idx(
    images_path,
    labels_path=None,
    split=IMBALANCED_SPLIT,
    image_size: int | None = 14,
    eval_images_path=None,
    eval_labels_path=None,
) -> ClassSplitDataset:
    """Build a class-split dataset from an IDX image/label file pair.

    ``labels_path`` defaults to the conventional sibling name
    (``...-images-idx3-ubyte`` -> ``...-labels-idx1-ubyte``).  Pixels are
    scaled to [0,1]; ``image_size`` < native resolution triggers a bilinear
    downscale (default 14, i.e. d = 196; pass None to keep the native size).
    An optional second pair supplies held-out evaluation examples.
    """
    images_path = Path(images_path)
    if labels_path is None:
        name = images_path.name.replace("images-idx3", "labels-idx1")
        if name == images_path.name:
            raise IdxFormatError(
                f"cannot infer a labels file for {images_path.name!r}; "
                "pass labels_path explicitly"
            )
        labels_path = images_path.with_name(name)

    def load_pair(ipath, lpath):
        images = read_idx(ipath)
        labels = read_idx(lpath)
        if images.ndim != 3:
            raise IdxFormatError(f"{ipath}: not an image file")
        if labels.ndim != 1:
            raise IdxFormatError(f"{lpath}: not a label file")
        if images.shape[0] != labels.shape[0]:
            raise IdxFormatError(
                f"count mismatch: {images.shape[0]} images vs "
                f"{labels.shape[0]} labels"
            )
        feats = images.astype(np.float64) / 255.0
        if image_size is not None:
            feats = np.clip(_downscale(feats, image_size), 0.0, 1.0)
        return feats.reshape(feats.shape[0], -1), labels.astype(np.int64)

    features, labels = load_pair(images_path, labels_path)
    eval_features = eval_labels = None
    if eval_images_path is not None:
        if eval_labels_path is None:
            name = Path(eval_images_path).name.replace("images-idx3", "labels-idx1")
            eval_labels_path = Path(eval_images_path).with_name(name)
        eval_features, eval_labels = load_pair(eval_images_path, eval_labels_path)
    return ClassSplitDataset(
        features,
        labels,
        split,
        num_classes=10,
        eval_features=eval_features,
        eval_labels=eval_labels,
    )


def load_mnist_dir(root, split=IMBALANCED_SPLIT, image_size: int | None = 14,
                   limit_per_class: int | None = None) -> ClassSplitDataset:
    """Load the four conventional MNIST files from a directory (train pair
    as training data, t10k pair as evaluation data), accepting either plain
    or .gz names.  ``limit_per_class`` subsamples the training set (first
    occurrences, deterministic) to keep desk-scale runs quick."""
    root = Path(root)

    def find(stem):
        for name in (stem, stem + ".gz"):
            p = root / name
            if p.exists():
                return p
        raise IdxFormatError(f"missing {stem}[.gz] under {root}")

    data = load_idx(
        find("train-images-idx3-ubyte"),
        find("train-labels-idx1-ubyte"),
        split=split,
        image_size=image_size,
        eval_images_path=find("t10k-images-idx3-ubyte"),
        eval_labels_path=find("t10k-labels-idx1-ubyte"),
    )
    if limit_per_class is None:
        return data
    keep = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)[:limit_per_class]
        keep.append(idx)
    keep = np.sort(np.concatenate(keep))
    return ClassSplitDataset(
        data.features[keep],
        data.labels[keep],
        split,
        num_classes=data.num_classes,
        eval_features=data.eval_features,
        eval_labels=data.eval_labels,
    )
