"""Dataset ingestion (IDX, libsvm, CSV), splitting and minibatch sampling."""
from __future__ import annotations

import csv
import gzip
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SampleKey

__all__ = [
    "DataFormatError",
    "Dataset",
    "MinibatchSampler",
    "load_idx",
    "write_idx",
    "binarize_odd_even",
    "split_train_val",
    "minibatch_stream",
    "load_libsvm",
    "load_csv",
    "write_csv",
    "load_dataset",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_scale: float = 1.0
    image_shape: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise DataFormatError(f"X must be a non-empty 2-D matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataFormatError(f"{y.shape[0] if y.ndim else 0} labels for {X.shape[0]} rows")
        if not np.all(np.isfinite(X)):
            raise DataFormatError("X has non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.feature_scale, self.image_shape, dict(self.meta))


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: truncated file, expected {count} bytes of data, "
                              f"found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    n = images.shape[0]
    X = images.reshape(n, -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), 255.0, tuple(images.shape[1:]))


def write_idx(dataset: Dataset, images_path, labels_path, compress: bool | None = None) -> None:
    """Write a dataset of integer-valued pixels back to an IDX pair.

    Pixels are ``X * feature_scale`` and must be integers in 0..255.
    ``compress=None`` gzips when the path ends in ``.gz``.
    """
    pix = dataset.X * dataset.feature_scale
    ints = np.rint(pix)
    if not np.array_equal(ints, pix) and not np.allclose(ints, pix, rtol=0, atol=1e-9):
        raise DataFormatError("pixel values are not integers after rescaling")
    if ints.min() < 0 or ints.max() > 255:
        raise DataFormatError("pixel values outside 0..255")
    shape = dataset.image_shape
    if shape is None:
        side = math.isqrt(dataset.d)
        shape = (side, side) if side * side == dataset.d else (dataset.d,)
    if math.prod(shape) != dataset.d:
        raise DataFormatError(f"image shape {shape} does not match {dataset.d} features")
    labels = np.asarray(dataset.y)
    if labels.min() < 0 or labels.max() > 255 or not np.all(labels == np.rint(labels)):
        raise DataFormatError("IDX labels must be integers in 0..255")
    img_bytes = struct.pack(">I", 0x0800 + 1 + len(shape)) \
        + struct.pack(">" + "I" * (1 + len(shape)), dataset.n, *shape) \
        + ints.astype(np.uint8).tobytes()
    lab_bytes = struct.pack(">II", IDX_LABELS_MAGIC, dataset.n) + labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, img_bytes), (labels_path, lab_bytes)):
        gz = str(path).endswith(".gz") if compress is None else compress
        Path(path).write_bytes(gzip.compress(payload, mtime=0) if gz else payload)


def binarize_odd_even(labels) -> np.ndarray:
    """Odd digits -> +1, even digits -> -1."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 9 or not np.all(labels == np.rint(labels))):
        raise DataFormatError("digit labels must be integers in 0..9")
    return np.where(labels.astype(np.int64) % 2 == 1, 1, -1).astype(np.int64)


def split_train_val(dataset: Dataset, n_tr: int, n_val: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint, seeded random train/validation subsets."""
    if n_tr <= 0 or n_val <= 0:
        raise ValueError("n_tr and n_val must be positive")
    if n_tr + n_val > dataset.n:
        raise ValueError(f"n_tr + n_val = {n_tr + n_val} exceeds {dataset.n} rows")
    perm = SampleKey(seed, 0, 0).generator().permutation(dataset.n)
    return dataset.subset(perm[:n_tr]), dataset.subset(perm[n_tr:n_tr + n_val])


# ---------------------------------------------------------------------------
# Minibatches

SAMPLING_MODES = ("iid_with_replacement", "epoch_shuffle")


@dataclass(frozen=True)
class MinibatchSampler:
    """Index sets for minibatches as pure functions of a :class:`SampleKey`.

    In ``iid_with_replacement`` mode each key gives ``b`` indices drawn
    uniformly with replacement.  In ``epoch_shuffle`` mode counter ``c``
    selects batch ``c % nb`` of the permutation for epoch ``c // nb``, where
    ``nb = ceil(n / b)``; the final batch of an epoch may be short.
    """

    n: int
    b: int
    mode: str = "iid_with_replacement"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.b <= self.n:
            raise ValueError(f"batch size must satisfy 1 <= b <= n, got b={self.b}, n={self.n}")
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"mode must be one of {SAMPLING_MODES}")

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.n // self.b)

    def indices(self, key: SampleKey, batch_shape: tuple = ()) -> np.ndarray:
        """``batch_shape + (b,)`` indices (shorter last axis for a short batch)."""
        if self.mode == "iid_with_replacement":
            return key.generator().integers(0, self.n, size=tuple(batch_shape) + (self.b,))
        nb = self.batches_per_epoch
        epoch, j = divmod(key.counter, nb)
        gen = SampleKey(key.master_seed, key.stream_id, epoch).generator()
        if batch_shape:
            base = np.broadcast_to(np.arange(self.n), tuple(batch_shape) + (self.n,))
            perm = gen.permuted(base, axis=-1)
        else:
            perm = gen.permutation(self.n)
        return perm[..., j * self.b:(j + 1) * self.b]

    def draw(self, i: int, stream_id: int = 0) -> np.ndarray:
        return self.indices(SampleKey(self.seed, stream_id, i))


def minibatch_stream(n: int, b: int, mode: str = "iid_with_replacement", seed: int = 0) -> MinibatchSampler:
    return MinibatchSampler(n, b, mode, seed)


# ---------------------------------------------------------------------------
# libsvm / CSV


def load_libsvm(path, n_features: int | None = None) -> Dataset:
    """Parse ``label idx:val ...`` lines (1-based, increasing indices) into a dense matrix."""
    labels, rows = [], []
    max_idx = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad label {tokens[0]!r}") from None
            entries, last = [], 0
            for tok in tokens[1:]:
                idx_s, sep, val_s = tok.partition(":")
                try:
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: malformed token {tok!r}") from None
                if not sep or idx < 1:
                    raise DataFormatError(f"{path}:{lineno}: malformed token {tok!r}")
                if idx <= last:
                    raise DataFormatError(f"{path}:{lineno}: indices must increase ({last} then {idx})")
                last = idx
                entries.append((idx, val))
            max_idx = max(max_idx, last)
            labels.append(label)
            rows.append(entries)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    d = n_features if n_features is not None else max_idx
    if max_idx > d:
        raise DataFormatError(f"{path}: feature index {max_idx} exceeds n_features={d}")
    X = np.zeros((len(rows), max(d, 1)))
    for i, entries in enumerate(rows):
        for idx, val in entries:
            X[i, idx - 1] = val
    y = np.asarray(labels)
    if np.all(y == np.rint(y)):
        y = y.astype(np.int64)
    return Dataset(X, y)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_csv(path) -> Dataset:
    """Numeric CSV with the label in the first column; a header row is optional."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not all(_is_number(t) for t in rows[0]):
        rows = rows[1:]
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    width = len(rows[0])
    for lineno, r in enumerate(rows, 1):
        if len(r) != width:
            raise DataFormatError(f"{path}: row {lineno} has {len(r)} fields, expected {width}")
    try:
        arr = np.array([[float(t) for t in r] for r in rows])
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    if width < 2:
        raise DataFormatError(f"{path}: need a label column and at least one feature")
    y = arr[:, 0]
    if np.all(y == np.rint(y)):
        y = y.astype(np.int64)
    return Dataset(arr[:, 1:], y)


def write_csv(dataset: Dataset, path, header: bool = True) -> None:
    """Write ``label,f0,f1,...`` rows with round-trip (``repr``) precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(["label"] + [f"f{j}" for j in range(dataset.d)])
    for label, row in zip(dataset.y.tolist(), dataset.X.tolist()):
        w.writerow([repr(label)] + [repr(v) for v in row])
    Path(path).write_text(buf.getvalue())


def load_dataset(fmt: str, path=None, labels_path=None) -> Dataset:
    if fmt == "idx":
        if path is None or labels_path is None:
            raise ValueError("idx format needs an images path and a labels path")
        return load_idx(path, labels_path)
    if fmt == "libsvm":
        return load_libsvm(path)
    if fmt == "csv":
        return load_csv(path)
    raise ValueError(f"unknown dataset format {fmt!r}; expected idx, libsvm or csv")
