"""Dataset ingestion.

Three sources are supported:

* ``builtin:digits`` - the scikit-learn handwritten digits (1797 samples)
  bilinearly upscaled from 8x8 to 28x28. Ships with the library so the
  digits task runs without downloads.
* an IDX archive pair (the standard 28x28 digit format, optionally
  gzipped): ``idx:<images_path>,<labels_path>``.
* a directory of 8-bit grayscale/color PNGs with a ``manifest.txt`` whose
  lines read ``<relative-path> <label> <train|test>``.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

__all__ = ["DigitsDataset", "builtin_digits", "load_idx_dataset", "load_image_folder", "load_dataset"]


@dataclass
class DigitsDataset:
    """Labeled grayscale images in [0, 1] with a train/test split."""

    images: np.ndarray
    labels: np.ndarray
    train_indices: np.ndarray
    test_indices: np.ndarray
    name: str = "digits"
    _extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def subset(self, indices) -> "DigitsDataset":
        indices = np.asarray(indices)
        return DigitsDataset(self.images[indices], self.labels[indices],
                             np.arange(len(indices)), np.arange(0), name=self.name)

    @property
    def train(self) -> "DigitsDataset":
        return self.subset(self.train_indices)

    @property
    def test(self) -> "DigitsDataset":
        return self.subset(self.test_indices)


def builtin_digits(image_size: int = 28, test_fraction: float = 0.2,
                   seed: int = 0) -> DigitsDataset:
    """Offline digits: scikit-learn's 8x8 set upscaled to ``image_size``."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = raw.images / 16.0
    factor = image_size / imgs.shape[-1]
    scaled = np.stack([np.clip(zoom(im, factor, order=1), 0.0, 1.0) for im in imgs])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(scaled))
    n_test = int(round(test_fraction * len(scaled)))
    return DigitsDataset(
        images=scaled.astype(np.float32),
        labels=raw.target.astype(np.int64),
        train_indices=perm[n_test:],
        test_indices=perm[:n_test],
        name="builtin-digits",
    )


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        magic = struct.unpack(">I", fh.read(4))[0]
        dtype_code = (magic >> 8) & 0xFF
        ndim = magic & 0xFF
        if magic >> 16 != 0 or dtype_code != 0x08:
            raise ValueError(f"{path}: not an unsigned-byte IDX file (magic {magic:#010x})")
        dims = struct.unpack(">" + "I" * ndim, fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: truncated IDX payload")
    return data.reshape(dims)


def load_idx_dataset(images_path, labels_path, test_fraction: float = 0.2,
                     seed: int = 0) -> DigitsDataset:
    images = _read_idx(Path(images_path)).astype(np.float32) / 255.0
    labels = _read_idx(Path(labels_path)).astype(np.int64)
    if images.ndim != 3 or len(images) != len(labels):
        raise ValueError("IDX images/labels do not line up")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))
    n_test = int(round(test_fraction * len(images)))
    return DigitsDataset(images, labels, perm[n_test:], perm[:n_test], name="idx")


def load_image_folder(root) -> DigitsDataset:
    """PNG directory with ``manifest.txt``: ``<relpath> <label> <train|test>``."""
    from PIL import Image

    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    images, labels, splits = [], [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("train", "test"):
            raise ValueError(f"{manifest}:{lineno}: expected '<path> <label> <train|test>'")
        img = Image.open(root / parts[0]).convert("L")
        images.append(np.asarray(img, dtype=np.float32) / 255.0)
        labels.append(int(parts[1]))
        splits.append(parts[2])
    arr = np.stack(images)
    splits = np.asarray(splits)
    return DigitsDataset(arr, np.asarray(labels, dtype=np.int64),
                         np.flatnonzero(splits == "train"),
                         np.flatnonzero(splits == "test"), name=root.name)


def load_dataset(spec: str) -> DigitsDataset:
    """Resolve a dataset argument from the CLI/config."""
    if spec == "builtin:digits":
        return builtin_digits()
    if spec.startswith("idx:"):
        parts = spec[len("idx:"):].split(",")
        if len(parts) != 2:
            raise ValueError("idx spec must be 'idx:<images>,<labels>'")
        return load_idx_dataset(parts[0], parts[1])
    path = Path(spec)
    if path.is_dir():
        return load_image_folder(path)
    raise ValueError(f"cannot interpret dataset spec {spec!r}")
