"""Dataset loaders (IDX, CSV), synthetic blobs, splits and config files."""

from __future__ import annotations

import csv
import gzip
import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    labels: Optional[np.ndarray] = None
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    image_shape: Optional[tuple[int, int]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataFormatError("X must be 2-D")
        if self.X.size and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise DataFormatError("feature values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.X):
                raise DataFormatError(f"{len(self.labels)} labels for {len(self.X)} rows")

    def split(self, name: str) -> np.ndarray:
        return self.X[self.splits[name]]

    def split_labels(self, name: str) -> Optional[np.ndarray]:
        return None if self.labels is None else self.labels[self.splits[name]]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1


def default_splits(n: int, seed: int = 0, fractions=(0.7, 0.1, 0.2)) -> dict[str, np.ndarray]:
    """Seeded shuffle into disjoint train/val/test index sets covering 0..n-1."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _idx_header(data: bytes, expected_magic: int, n_dims: int, what: str):
    if len(data) < 4 + 4 * n_dims:
        raise DataFormatError(f"{what}: truncated header at offset {len(data)}")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(f"{what}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    return struct.unpack(f">{n_dims}I", data[4:4 + 4 * n_dims])


def load_idx(images_path, labels_path=None, name: Optional[str] = None) -> Dataset:
    data = _read_bytes(images_path)
    count, rows, cols = _idx_header(data, IDX_IMAGES_MAGIC, 3, "images")
    start = 16
    need = start + count * rows * cols
    if len(data) < need:
        raise DataFormatError(f"images: truncated pixel data at offset {len(data)}, expected {need} bytes")
    if len(data) > need:
        raise DataFormatError(f"images: {len(data) - need} unexpected trailing bytes at offset {need}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=start)
    X = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0

    labels = None
    if labels_path is not None:
        ldata = _read_bytes(labels_path)
        (n_labels,) = _idx_header(ldata, IDX_LABELS_MAGIC, 1, "labels")
        if n_labels != count:
            raise DataFormatError(f"labels: count {n_labels} at offset 4 does not match {count} images")
        if len(ldata) != 8 + n_labels:
            raise DataFormatError(f"labels: expected {8 + n_labels} bytes, found {len(ldata)} (offset 8)")
        labels = np.frombuffer(ldata, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(name=name or Path(images_path).stem, X=X, labels=labels, image_shape=(rows, cols))


def write_idx(images_path, images: np.ndarray, labels_path=None, labels=None) -> None:
    """Write uint8 images (count, rows, cols) and optional labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    if labels_path is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_csv(path, has_labels: bool = True, scale: bool = True, name: Optional[str] = None) -> Dataset:
    """Numeric CSV, optional header line, last column is the label when flagged.

    With ``scale`` each feature column is min-max scaled to [0, 1]; constant
    columns map to 0.
    """
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not any(_is_number(c) for c in row):
                continue  # header
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(f"line {lineno}: expected {width} fields, found {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: non-numeric field ({exc})") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    labels = None
    if has_labels:
        raw = arr[:, -1]
        if np.any(raw != np.round(raw)):
            raise DataFormatError("labels must be integers")
        _, labels = np.unique(raw.astype(np.int64), return_inverse=True)
        arr = arr[:, :-1]
    if scale:
        lo = arr.min(0)
        span = arr.max(0) - lo
        safe = np.where(span > 0, span, 1.0)
        arr = np.where(span > 0, (arr - lo) / safe, 0.0)
    return Dataset(name=name or Path(path).stem, X=arr, labels=labels)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for i, row in enumerate(dataset.X):
            fields = [repr(float(v)) for v in row]
            if dataset.labels is not None:
                fields.append(str(int(dataset.labels[i])))
            writer.writerow(fields)


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    clusters: int = 3
    dim: int = 10
    per_cluster: int = 100
    spread: float = 6.0  # minimum distance between blob centers
    std: float = 0.5  # within-blob standard deviation
    seed: int = 0


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Isotropic Gaussian blobs squashed into (0, 1) by the logistic function.

    Centers are drawn from N(0, spread^2 / dim * I), so typical pairwise
    distances are about sqrt(2) * spread, and redrawn until every pair is at
    least ``spread`` apart.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(10_000):
        centers = rng.normal(0.0, spec.spread / np.sqrt(spec.dim), size=(spec.clusters, spec.dim))
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if spec.clusters == 1 or dist.min() >= spec.spread:
            break
    else:
        raise RuntimeError("could not place blob centers; lower spread or dim")
    labels = np.repeat(np.arange(spec.clusters), spec.per_cluster)
    raw = centers[labels] + rng.normal(0.0, spec.std, size=(len(labels), spec.dim))
    n = len(labels)
    return Dataset(name="synthetic", X=expit(raw), labels=labels, splits=default_splits(n, spec.seed),
                   meta={"centers": centers, "raw": raw})


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    """Flat key/value config from a TOML or JSON file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        values = json.loads(text)
    else:
        values = tomllib.loads(text)
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config must be flat; nested tables: {nested}")
    return values
