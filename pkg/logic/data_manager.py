"""
Dataset ingestion and report export for PruneLab.

Reads IDX ubyte files (optionally gzipped) or generates seeded Gaussian
clusters, splits 20% of the test pool off as a validation set, and writes
the optional Excel report workbook.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, cast

import numpy as np

from engine.network import Batch
from errors import DatasetError
from logic.config import DatasetSpec

GZIP_MAGIC = b"\x1f\x8b"

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True, eq=False)
class DatasetSplits:
    train: Batch
    val: Batch
    test: Batch

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.train.inputs.shape[1:])


# ── IDX parsing ──────────────────────────────────────────────────────


def parse_idx(data: bytes, source: str = "idx") -> np.ndarray:
    """
    Decode an IDX payload.

    Layout: two zero bytes, a type byte, a dimension count, then one
    big-endian u32 per dimension followed by the row-major payload.

    Args:
        data: Raw (already decompressed) bytes.
        source: Name used in error messages.

    Returns:
        Array with the file's dimensions, in native byte order.

    Raises:
        DatasetError carrying the byte offset where parsing failed.
    """
    if len(data) < 4:
        raise DatasetError(f"{source}: header is truncated", offset=len(data))
    if data[0] != 0 or data[1] != 0:
        raise DatasetError(f"{source}: bad magic number", offset=0)
    dtype = IDX_DTYPES.get(data[2])
    if dtype is None:
        raise DatasetError(f"{source}: unknown IDX type code 0x{data[2]:02x}", offset=2)
    ndim = data[3]
    if ndim == 0:
        raise DatasetError(f"{source}: zero dimensions", offset=3)

    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise DatasetError(f"{source}: dimension table is truncated", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])

    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    available = len(data) - header_end
    if available < expected:
        raise DatasetError(f"{source}: payload has {available} bytes, expected {expected}", offset=len(data))
    if available > expected:
        raise DatasetError(f"{source}: {available - expected} trailing bytes", offset=header_end + expected)

    array = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize, offset=header_end)
    return array.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path: str) -> np.ndarray:
    """Read an IDX file from disk, decompressing gzip transparently."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"Cannot read {path}: {exc}") from exc
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DatasetError(f"{path}: corrupt gzip stream: {exc}", offset=0) from exc
    return parse_idx(raw, source=str(path))


def idx_batch(images_path: str, labels_path: str) -> Batch:
    """Pair an IDX image file with its label file; images become [n, 1, rows, cols] in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: labels must be one-dimensional, got {labels.ndim} dimensions", offset=3)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{images_path} has {images.shape[0]} items but {labels_path} has {labels.shape[0]}")
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.dtype == np.uint8:
        inputs = images.astype(np.float32) / np.float32(255.0)
    else:
        inputs = images.astype(np.float32)
    return Batch(inputs, labels.astype(np.int64))


# ── synthetic data ───────────────────────────────────────────────────


def synthetic_clusters(
    classes: int,
    n: int,
    seed: int,
    shape: Sequence[int] = (16,),
    separation: float = 1.0,
    noise: float = 1.0,
    centers: Optional[np.ndarray] = None,
) -> Batch:
    """
    Balanced Gaussian clusters, one per class.

    Class c gets ``n // classes`` samples, plus one for the first
    ``n % classes`` classes. Samples are shuffled.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0])))
    features = int(np.prod(shape))
    if centers is None:
        centers = rng.normal(0.0, separation, size=(classes, features))
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    labels = np.repeat(np.arange(classes), counts)
    inputs = centers[labels] + rng.normal(0.0, noise, size=(n, features))
    order = rng.permutation(n)
    return Batch(
        inputs[order].reshape((n, *shape)).astype(np.float32),
        labels[order].astype(np.int64),
    )


def _synthetic_splits(spec: DatasetSpec) -> Tuple[Batch, Batch]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(spec.seed), 1])))
    centers = rng.normal(0.0, spec.separation, size=(spec.classes, int(np.prod(spec.shape))))
    train = synthetic_clusters(spec.classes, spec.n_train, spec.seed * 2 + 1, spec.shape, spec.separation, spec.noise, centers)
    pool = synthetic_clusters(spec.classes, spec.n_test, spec.seed * 2 + 2, spec.shape, spec.separation, spec.noise, centers)
    return train, pool


# ── splitting ────────────────────────────────────────────────────────


def split_validation(pool: Batch, fraction: float = 0.2, seed: int = 0) -> Tuple[Batch, Batch]:
    """Seeded shuffle of the test pool into (validation, test); the two are disjoint."""
    n = len(pool)
    n_val = int(round(fraction * n))
    order = np.random.Generator(np.random.PCG64(int(seed))).permutation(n)
    return pool.take(np.sort(order[:n_val])), pool.take(np.sort(order[n_val:]))


def load_dataset(spec: DatasetSpec) -> DatasetSplits:
    """
    Load the train set and split the test pool 20/80 into validation/test.

    Args:
        spec: Dataset section of the experiment config.

    Returns:
        DatasetSplits(train, val, test); the train set is never split.
    """
    if spec.kind == "synthetic":
        train, pool = _synthetic_splits(spec)
    else:
        train = idx_batch(spec.train_images, spec.train_labels)
        pool = idx_batch(spec.test_images, spec.test_labels)
        if train.inputs.shape[1:] != pool.inputs.shape[1:]:
            raise DatasetError(
                f"Train images {train.inputs.shape[1:]} and test images {pool.inputs.shape[1:]} differ in shape"
            )
    val, test = split_validation(pool, spec.val_fraction, spec.split_seed)
    return DatasetSplits(train, val, test)


def num_classes(splits: DatasetSplits) -> int:
    labels = np.concatenate([splits.train.labels, splits.val.labels, splits.test.labels])
    return int(labels.max()) + 1


# ── Excel report ─────────────────────────────────────────────────────


def _column_letter(col_idx: int) -> str:
    letters = ""
    while col_idx > 0:
        col_idx, remainder = divmod(col_idx - 1, 26)
        letters = chr(65 + remainder) + letters
    return letters


def export_workbook(sheets: Dict[str, Any], filename: str) -> bool:
    """
    Write DataFrames to one styled .xlsx workbook, one sheet per entry.

    Args:
        sheets: Sheet title -> pandas DataFrame.
        filename: Destination path.

    Returns:
        True on success, False when openpyxl/pandas are unavailable.
    """
    try:
        import pandas as pd
        from openpyxl.styles import Alignment, Font, PatternFill
    except Exception:
        return False

    header_font = Font(bold=True, color="FFFFFF")
    header_fill = PatternFill(start_color="2C3E50", end_color="2C3E50", fill_type="solid")
    header_alignment = Alignment(horizontal="center", vertical="center")

    with pd.ExcelWriter(filename, engine="openpyxl") as writer:
        for title, frame in sheets.items():
            frame.to_excel(writer, sheet_name=title[:31], index=False)
            ws = cast(Any, writer.sheets[title[:31]])
            for col_idx, header in enumerate(frame.columns, start=1):
                cell = ws.cell(row=1, column=col_idx)
                cell.font = header_font
                cell.fill = header_fill
                cell.alignment = header_alignment
                ws.column_dimensions[_column_letter(col_idx)].width = max(12, len(str(header)) + 4)
            ws.freeze_panes = "A2"
    return True
