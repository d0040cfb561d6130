"""Per-unit batch normalization with its adjoint and running statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Matrix, ShapeError

EPSILON = 1e-6


@dataclass(frozen=True)
class BatchStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = EPSILON

    @property
    def width(self) -> int:
        return self.mean.shape[0]


@dataclass
class RunningStats:
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    decay: float = 0.99
    update_count: int = 0

    @property
    def populated(self) -> bool:
        return self.update_count > 0

    def as_batch_stats(self) -> BatchStats:
        return BatchStats(self.mean, self.std)


def batch_statistics(z_pre: Matrix, epsilon: float = EPSILON) -> BatchStats:
    """Column means and sqrt(biased variance + epsilon)."""
    if z_pre.shape[0] < 2:
        raise ValueError(f"batch statistics need at least 2 rows, got {z_pre.shape[0]}")
    mean = z_pre.mean(axis=0)
    var = np.square(z_pre - mean).mean(axis=0)
    return BatchStats(mean, np.sqrt(var + epsilon), epsilon)


def normalize(z_pre: Matrix, stats: BatchStats) -> Matrix:
    if z_pre.shape[1] != stats.width:
        raise ShapeError(f"stats have width {stats.width}, input has {z_pre.shape[1]} columns")
    return (z_pre - stats.mean) / stats.std


def normalize_backward(
    z: Matrix,
    stats: BatchStats,
    d_z: Matrix,
    d_mean: np.ndarray | None = None,
    d_std: np.ndarray | None = None,
) -> Matrix:
    """Adjoint of ``z_pre -> (normalize(z_pre), mean, std)`` with batch statistics.

    ``z`` is the normalized output of the forward call.  The mean and std are
    treated as functions of the batch, so every row influences every other.
    """
    n = z.shape[0]
    d_pre = (d_z - d_z.mean(axis=0) - z * (d_z * z).mean(axis=0)) / stats.std
    if d_mean is not None:
        d_pre = d_pre + d_mean / n
    if d_std is not None:
        d_pre = d_pre + z * (d_std / n)
    return d_pre


def ema_update(running: RunningStats, batch: BatchStats) -> RunningStats:
    if running.populated and running.mean.shape != batch.mean.shape:
        raise ShapeError(
            f"running stats have width {running.mean.shape[0]}, batch has {batch.width}"
        )
    if not running.populated:
        return RunningStats(batch.mean.copy(), batch.std.copy(), running.decay, 1)
    d = running.decay
    return RunningStats(
        d * running.mean + (1.0 - d) * batch.mean,
        d * running.std + (1.0 - d) * batch.std,
        d,
        running.update_count + 1,
    )
