"""Small labelled datasets: synthetic blobs, 8x8 digits, IDX and CSV files.

All inputs are scaled into [-1, 1], the range of the generators' tanh output.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"x {self.x.shape} and y {self.y.shape} are not congruent")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.n_classes, self.name)


def train_test_split(data: LabeledDataset, test_fraction: float, rng: np.random.Generator
                     ) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split, so every class appears in both halves in proportion."""
    train_idx, test_idx = [], []
    for k in range(data.n_classes):
        idx = np.flatnonzero(data.y == k)
        idx = rng.permutation(idx)
        n_test = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return data.subset(train), data.subset(test)


def make_blobs(n_per_class: int, n_classes: int, dim: int, rng: np.random.Generator,
               sigma: float = 0.05, separation: float = 0.5) -> LabeledDataset:
    """Gaussian blobs with centres at least ``separation`` apart.

    Defaults put centres 10 sigma apart, well clear of the 4 sigma margin a
    linear separator needs.
    """
    centres = []
    while len(centres) < n_classes:
        c = rng.uniform(-0.7, 0.7, size=dim)
        if all(np.linalg.norm(c - o) >= separation for o in centres):
            centres.append(c)
    xs, ys = [], []
    for k, c in enumerate(centres):
        xs.append(c + sigma * rng.standard_normal((n_per_class, dim)))
        ys.append(np.full(n_per_class, k))
    x = np.clip(np.concatenate(xs), -1.0, 1.0)
    return LabeledDataset(x, np.concatenate(ys), n_classes, "blobs")


def load_digits() -> LabeledDataset:
    """The 1797-image 8x8 handwritten digits corpus bundled with scikit-learn."""
    from sklearn.datasets import load_digits as _load

    bunch = _load()
    x = bunch.data / 16.0 * 2.0 - 1.0
    return LabeledDataset(x, bunch.target, 10, "digits")


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file (the MNIST container format), optionally gzipped."""
    path = Path(path)
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: bad IDX magic {raw[:4]!r}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - offset < count * dtype.itemsize:
        raise ValueError(f"{path}: expected {count} items, file is truncated")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    target = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype
    code = next((k for k, v in _IDX_DTYPES.items() if np.dtype(v) == target), None)
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.astype(target).tobytes())


def _scale_pixels(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo) * 2.0 - 1.0


def load_idx_pair(images: str | Path, labels: str | Path) -> LabeledDataset:
    x = read_idx(images)
    y = read_idx(labels).astype(np.int64)
    x = x.reshape(x.shape[0], -1)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    return LabeledDataset(_scale_pixels(x), y, int(y.max()) + 1, Path(images).stem)


def load_csv(path: str | Path) -> LabeledDataset:
    """Rows of ``label,pixel0,pixel1,...``; a non-numeric first row is treated as a header."""
    path = Path(path)
    rows = []
    with open(path, newline="") as f:
        for i, row in enumerate(csv.reader(f)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}: non-numeric value on line {i + 1}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows)
    y = arr[:, 0].astype(np.int64)
    return LabeledDataset(_scale_pixels(arr[:, 1:]), y, int(y.max()) + 1, path.stem)


def load_dataset(descriptor: str, rng: np.random.Generator) -> LabeledDataset:
    """Resolve a dataset descriptor.

    ``digits``, ``blobs`` / ``blobs:DIM:CLASSES``, ``csv:PATH`` and
    ``idx:IMAGES,LABELS`` are understood.
    """
    kind, _, rest = descriptor.partition(":")
    if kind == "digits":
        return load_digits()
    if kind == "blobs":
        dim, n_classes = 2, 3
        if rest:
            dim_s, _, cls_s = rest.partition(":")
            dim, n_classes = int(dim_s), int(cls_s or 3)
        return make_blobs(200, n_classes, dim, rng)
    if kind == "csv":
        return load_csv(rest)
    if kind == "idx":
        images, _, labels = rest.partition(",")
        return load_idx_pair(images, labels)
    raise ValueError(f"unknown dataset descriptor {descriptor!r}")
