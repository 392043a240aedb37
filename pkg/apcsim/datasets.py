"""
Simple dataset module.
Reads IDX (optionally gzip-compressed) and headerless label-first CSV files.
"""

import csv
import gzip
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    """
    Features and integer labels of one split.

    Attributes:
        features: Array (count, *sample_shape), float64
        labels: Array (count,), int64
        split: Split tag such as train or test
    """

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} samples but labels shaped {self.labels.shape}")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def check_model(self, model) -> None:
        """
        Raises:
            DataError: If samples do not fit the model input or labels exceed its classes
        """
        if self.sample_shape != model.input_shape:
            raise DataError(f"samples shaped {self.sample_shape}, model expects {model.input_shape}")
        if self.labels.size and self.labels.max() >= model.classes:
            raise DataError(f"label {self.labels.max()} outside [0, {model.classes})")

    def take(self, count: int) -> "Dataset":
        return Dataset(self.features[:count], self.labels[:count], self.split)

    def subset(self, fraction: float, seed: int = 0) -> "Dataset":
        """A seeded random subset holding ceil(fraction * len) samples, in original order."""
        if fraction >= 1.0:
            return self
        count = max(1, math.ceil(fraction * len(self)))
        picks = np.sort(np.random.default_rng(seed).choice(len(self), size=count, replace=False))
        return Dataset(self.features[picks], self.labels[picks], self.split)

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = np.random.default_rng(seed).permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            picks = order[start:start + batch_size]
            yield self.features[picks], self.labels[picks]

    def feature_batches(self, batch_size: int, limit: Optional[int] = None) -> Iterator[np.ndarray]:
        data = self if limit is None else self.take(limit)
        for features, _ in data.batches(batch_size):
            yield features


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """
    Read an IDX file: two zero bytes, a type byte, a dimension count, then
    big-endian 32-bit dimensions followed by the data.

    Raises:
        DataError: If the file is missing, the header is malformed or the data is short
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise DataError(f"{path}: bad IDX magic number")
    dtype, ndims = IDX_DTYPES[raw[2]], raw[3]
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = tuple(int(d) for d in np.frombuffer(raw[4:header], dtype=">u4"))
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header < count * dtype.itemsize:
        raise DataError(f"{path}: expected {count} values of {dtype}, file is short")
    return np.frombuffer(raw[header:header + count * dtype.itemsize], dtype=dtype).reshape(dims)


def _idx_magic(path: Path) -> int:
    with _open(path) as f:
        head = f.read(4)
    return int.from_bytes(head, "big") if len(head) == 4 else -1


def _read_csv_rows(path: Path):
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    opener = (lambda p: gzip.open(p, "rt", newline="")) if path.suffix == ".gz" else (lambda p: open(p, newline=""))
    with opener(path) as f:
        rows = [row for row in csv.reader(f) if row]
    widths = {len(row) for row in rows}
    if len(widths) > 1:
        raise DataError(f"{path}: ragged rows with {sorted(widths)} columns")
    try:
        return np.asarray(rows, dtype=np.float64)
    except ValueError as e:
        raise DataError(f"{path}: {e}")


def load_dataset(path, fmt: str = "idx", labels_path=None, scale: float = 1.0 / 255.0,
                 sample_shape: Optional[Sequence[int]] = None, split: str = "train") -> Dataset:
    """
    Load a dataset split.

    IDX: `path` holds the images (magic 0x00000803, images gain a channel axis)
    and `labels_path` the labels (magic 0x00000801). CSV: headerless rows,
    label first, or features only with labels in a separate one-column file.
    Features are multiplied by `scale`.

    Args:
        path: Image or feature file
        fmt: "idx" or "csv"
        labels_path: Label file (required for IDX)
        scale: Feature normalization factor
        sample_shape: Reshape each sample to this shape (for example (1, 28, 28))
        split: Split tag

    Returns:
        Dataset

    Raises:
        DataError: Missing files, bad magic numbers, ragged rows or count mismatches
    """
    path = Path(path)
    if fmt == "idx":
        if labels_path is None:
            raise DataError("IDX datasets need a labels file")
        for file, magic in ((path, IDX_IMAGES_MAGIC), (Path(labels_path), IDX_LABELS_MAGIC)):
            if not file.exists():
                raise DataError(f"missing dataset file {file}")
            if _idx_magic(file) != magic:
                raise DataError(f"{file}: magic number is not {magic:#010x}")
        images = read_idx(path).astype(np.float64)
        labels = read_idx(labels_path).astype(np.int64)
        features = images[:, None, :, :]
    elif fmt == "csv":
        table = _read_csv_rows(path)
        if labels_path is None:
            if table.ndim != 2 or table.shape[1] < 2:
                raise DataError(f"{path}: expected a label column and at least one feature")
            labels, features = table[:, 0], table[:, 1:]
        else:
            labels = _read_csv_rows(Path(labels_path)).reshape(-1)
            features = table
        if np.any(labels != np.round(labels)):
            raise DataError(f"{path}: labels must be integers")
        labels = labels.astype(np.int64)
    else:
        raise DataError(f"unknown dataset format {fmt!r}, expected idx or csv")

    if len(features) != len(labels):
        raise DataError(f"{len(features)} samples but {len(labels)} labels")
    if sample_shape is not None:
        sample_shape = tuple(int(s) for s in sample_shape)
        if int(np.prod(features.shape[1:])) != int(np.prod(sample_shape)):
            raise DataError(f"samples of {features.shape[1:]} cannot be shaped as {sample_shape}")
        features = features.reshape((len(features),) + sample_shape)
    dataset = Dataset(features * scale, labels, split)
    logger.info("loaded %s split: %d samples shaped %s", split, len(dataset), dataset.sample_shape)
    return dataset


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (used to stage fixtures and exports)."""
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())
