"""Dense float64 helpers shared by every part of the network.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 with the
batch along the rows and units along the columns.

Random numbers come from ``numpy.random.Generator`` (PCG64 bit generator,
ziggurat normal transform).  Independent streams are derived from a parent
seed and a text label so that weight init, corruption noise and data
shuffling never share draws.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

Matrix = np.ndarray


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Matrix:
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.ndim} dimensions")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {m.shape[1]}")
    check_finite(m)
    return m


def check_finite(m: np.ndarray, what: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def identity(n: int) -> Matrix:
    return np.eye(n, dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    check_finite(out, "matmul result")
    return out


def softmax_rows(m: Matrix) -> Matrix:
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def relu(m: Matrix) -> Matrix:
    return np.maximum(m, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the stream named ``label`` under parent ``seed``.

    The label is hashed with CRC-32 and used as the spawn key, so the same
    (seed, label) pair always yields the same stream and different labels
    yield statistically independent ones.
    """
    key = zlib.crc32(label.encode("utf-8"))
    ss = np.random.SeedSequence(seed, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))


def gaussian_sample(rng: np.random.Generator, rows: int, cols: int, std: float) -> Matrix:
    if std < 0:
        raise ValueError(f"noise std must be nonnegative, got {std}")
    if std == 0:
        return np.zeros((rows, cols))
    return std * rng.standard_normal((rows, cols))


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], theta: Sequence[float], h: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        orig = probe[i]
        probe[i] = orig + h
        fp = f(probe)
        probe[i] = orig - h
        fm = f(probe)
        probe[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective is not finite around coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
