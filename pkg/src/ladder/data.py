"""Datasets: IDX ingestion, balanced semi-supervised splits, synthetic blobs, batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import Matrix

IDX_UBYTE = 0x08


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: Matrix
    labels: np.ndarray | None
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[1] == 0:
            raise ValueError(f"inputs must be a non-empty 2-D matrix, got shape {self.inputs.shape}")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain NaN or Inf")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ValueError("need exactly one label per row")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class LabeledSplit:
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    validation_idx: np.ndarray


# -- IDX ------------------------------------------------------------------


def parse_idx(raw: bytes) -> tuple[tuple[int, ...], np.ndarray]:
    """Decode an uncompressed IDX file with unsigned-byte payload."""
    if len(raw) < 4:
        raise IdxError("truncated IDX header: fewer than 4 bytes")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise IdxError(f"bad IDX magic 0x{raw[:4].hex()}: first two bytes must be zero")
    if dtype != IDX_UBYTE:
        raise IdxError(f"unsupported IDX element type 0x{dtype:02x} (only unsigned byte 0x08)")
    if ndim == 0:
        raise IdxError("bad IDX magic: zero dimensions")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"truncated IDX header: need {header} bytes, have {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    payload = raw[header:]
    if len(payload) < size:
        raise IdxError(f"truncated IDX payload: expected {size} bytes, found {len(payload)}")
    if len(payload) > size:
        raise IdxError(f"IDX payload has {len(payload) - size} trailing bytes")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return tuple(dims), values


def serialize_idx(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.dtype != np.uint8:
        raise IdxError("only uint8 arrays can be written as IDX")
    if values.ndim == 0:
        raise IdxError("IDX needs at least one dimension")
    head = struct.pack(">HBB", 0, IDX_UBYTE, values.ndim)
    head += struct.pack(f">{values.ndim}I", *values.shape)
    return head + np.ascontiguousarray(values).tobytes()


def idx_to_matrix(values: np.ndarray) -> Matrix:
    """Flatten all but the first axis and scale bytes to [0, 1]."""
    return values.reshape(values.shape[0], -1).astype(np.float64) / 255.0


def load_idx_dataset(images_path: str | Path, labels_path: str | Path, num_classes: int = 10) -> Dataset:
    _, images = parse_idx(Path(images_path).read_bytes())
    _, labels = parse_idx(Path(labels_path).read_bytes())
    if images.ndim < 2 or labels.ndim != 1:
        raise IdxError("expected an image file with >= 2 dims and a 1-D label file")
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(idx_to_matrix(images), labels.astype(np.int64), num_classes)


# -- CSV (label first, then features) ---------------------------------------


def save_csv_dataset(path: str | Path, ds: Dataset) -> None:
    if ds.labels is None:
        raise ValueError("CSV datasets must carry labels")
    with open(path, "w") as f:
        f.write(f"# classes={ds.num_classes}\n")
        for label, row in zip(ds.labels, ds.inputs):
            f.write(",".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def load_csv_dataset(path: str | Path) -> Dataset:
    num_classes = None
    labels, rows = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("classes="):
                    num_classes = int(line.split("=", 1)[1])
                continue
            parts = line.split(",")
            try:
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(np.array(rows, dtype=np.float64), labels, num_classes)


# -- splits -----------------------------------------------------------------


def balanced_subset(labels: np.ndarray, n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """``n / num_classes`` indices of every class, without replacement, shuffled."""
    if n % num_classes != 0:
        raise ValueError(f"{n} labels cannot be split evenly over {num_classes} classes")
    per_class = n // num_classes
    labels = np.asarray(labels)
    picked = []
    for k in range(num_classes):
        members = np.flatnonzero(labels == k)
        if members.size < per_class:
            raise ValueError(f"class {k} has {members.size} members, need {per_class}")
        picked.append(rng.choice(members, size=per_class, replace=False))
    out = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    return rng.permutation(out)


def make_split(ds: Dataset, val_size: int, n_labels: int | None, rng: np.random.Generator,
               n_unlabeled: int | None = None) -> LabeledSplit:
    """Validation rows first, then labeled rows from the remainder.

    ``n_labels=None`` labels every remaining row (no class balancing).
    ``n_unlabeled`` keeps only a random subset of that size as unlabeled;
    the dropped rows are not used at all.
    """
    n = len(ds)
    if ds.labels is None:
        raise ValueError("splitting needs a labeled dataset")
    if val_size < 0 or val_size > n or (n_labels is not None and val_size + n_labels > n):
        raise ValueError(f"validation {val_size} + labels {n_labels} exceed {n} rows")
    order = rng.permutation(n)
    val = np.sort(order[:val_size])
    rest = np.sort(order[val_size:])
    if n_labels is None:
        labeled = rest
    else:
        labeled = rest[balanced_subset(ds.labels[rest], n_labels, ds.num_classes, rng)]
    unlabeled = np.setdiff1d(rest, labeled)
    if n_unlabeled is not None:
        if not 0 <= n_unlabeled <= unlabeled.size:
            raise ValueError(f"asked for {n_unlabeled} unlabeled rows, only {unlabeled.size} remain")
        unlabeled = np.sort(rng.choice(unlabeled, size=n_unlabeled, replace=False))
    return LabeledSplit(np.asarray(labeled, dtype=np.int64), unlabeled.astype(np.int64), val.astype(np.int64))


def synth_mixture(
    num_classes: int,
    per_class: int,
    dim: int,
    class_means: Sequence[Sequence[float]],
    within_std: float | Sequence[float],
    rng: np.random.Generator,
) -> Dataset:
    """Gaussian blobs; ``within_std`` is a scalar or one std per input dimension."""
    means = np.asarray(class_means, dtype=np.float64)
    if means.shape != (num_classes, dim):
        raise ValueError(f"expected means of shape {(num_classes, dim)}, got {means.shape}")
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    std = np.broadcast_to(np.asarray(within_std, dtype=np.float64), (dim,))
    if np.any(std < 0):
        raise ValueError("within-class std must be nonnegative")
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + std * rng.standard_normal((labels.size, dim))
    return Dataset(x, labels, num_classes)


# -- batching -----------------------------------------------------------------


class BatchSampler:
    """Epoch iterator combining a labeled and an unlabeled sub-batch per step.

    The unlabeled pool is split once per epoch, in shuffled order, into
    ``ceil(pool / batch_unlabeled)`` nearly equal chunks.  Labeled rows are
    drawn cyclically and reshuffled on every wrap-around; the cursor persists
    across epochs.  With ``include_labeled`` the labeled rows also join the
    unlabeled pool (they contribute to the denoising cost there, unmasked).
    """

    def __init__(
        self,
        split: LabeledSplit,
        ds: Dataset,
        batch_labeled: int,
        batch_unlabeled: int,
        rng: np.random.Generator,
        include_labeled: bool = True,
        steps_per_epoch: int = 0,
    ):
        n_lab = split.labeled_idx.size
        if batch_labeled > n_lab:
            raise ValueError(f"labeled batch size {batch_labeled} exceeds {n_lab} labeled rows")
        if batch_labeled < 0 or batch_unlabeled < 0 or batch_labeled + batch_unlabeled < 1:
            raise ValueError("batch sizes must be nonnegative and not both zero")
        self.ds = ds
        self.labeled = split.labeled_idx
        pool = split.unlabeled_idx
        if include_labeled:
            pool = np.concatenate([pool, split.labeled_idx])
        self.pool = pool if batch_unlabeled > 0 else np.empty(0, dtype=np.int64)
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.rng = rng
        self.steps_per_epoch = steps_per_epoch
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def _take_labeled(self) -> np.ndarray:
        out = []
        need = self.batch_labeled
        while need > 0:
            if self._cursor >= self._order.size:
                self._order = self.rng.permutation(self.labeled)
                self._cursor = 0
            take = self._order[self._cursor : self._cursor + need]
            self._cursor += take.size
            need -= take.size
            out.append(take)
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def _chunks(self) -> list[np.ndarray]:
        if self.pool.size == 0:
            n = self.steps_per_epoch or max(1, math.ceil(self.labeled.size / max(self.batch_labeled, 1)))
            return [np.empty(0, dtype=np.int64)] * n
        n = math.ceil(self.pool.size / self.batch_unlabeled)
        chunks = np.array_split(self.rng.permutation(self.pool), n)
        if self.steps_per_epoch:
            chunks = chunks[: self.steps_per_epoch]
        return chunks

    def epoch(self) -> Iterator[tuple[Matrix, np.ndarray, np.ndarray]]:
        labels = self.ds.labels
        for chunk in self._chunks():
            lab = self._take_labeled()
            idx = np.concatenate([lab, chunk])
            mask = np.zeros(idx.size, dtype=bool)
            mask[: lab.size] = True
            targets = np.full(idx.size, -1, dtype=np.int64)
            if lab.size:
                targets[: lab.size] = labels[lab]
            yield self.ds.inputs[idx], targets, mask

    def epoch_indices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Index form of one epoch: list of (labeled rows, unlabeled rows)."""
        return [(self._take_labeled(), chunk) for chunk in self._chunks()]


def batches(split: LabeledSplit, ds: Dataset, batch_labeled: int, batch_unlabeled: int,
            rng: np.random.Generator, include_labeled: bool = True) -> list[tuple[Matrix, np.ndarray, np.ndarray]]:
    """One epoch of (X, targets, labeled_mask) batches."""
    return list(BatchSampler(split, ds, batch_labeled, batch_unlabeled, rng, include_labeled).epoch())
