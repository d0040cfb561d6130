"""Supervised cross-entropy, layer-wise denoising cost and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoder import DecoderTrace
from .encoder import CleanTrace
from .numerics import Matrix

LOG_FLOOR = 1e-15


@dataclass(frozen=True)
class CostBreakdown:
    c_supervised: float
    c_denoise_per_layer: tuple[float, ...]
    c_denoise: float
    total: float


def supervised_cost(y_tilde: Matrix, targets: Sequence[int], labeled_mask: Sequence[bool]) -> float:
    mask = np.asarray(labeled_mask, dtype=bool)
    if not mask.any():
        return 0.0
    t = np.asarray(targets)[mask].astype(np.int64)
    K = y_tilde.shape[1]
    if np.any(t < 0) or np.any(t >= K):
        raise ValueError(f"target index outside [0, {K})")
    p = y_tilde[mask][np.arange(t.size), t]
    return float(-np.log(np.maximum(p, LOG_FLOOR)).mean())


def supervised_cost_grad(y_tilde: Matrix, targets, labeled_mask) -> Matrix:
    """d C_c / d y_tilde (zero where the log floor is active)."""
    grad = np.zeros_like(y_tilde)
    mask = np.asarray(labeled_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return grad
    rows = np.flatnonzero(mask)
    t = np.asarray(targets)[mask].astype(np.int64)
    p = y_tilde[rows, t]
    grad[rows, t] = np.where(p > LOG_FLOOR, -1.0 / (n * np.maximum(p, LOG_FLOOR)), 0.0)
    return grad


def denoising_cost(
    clean: CleanTrace, dec: DecoderTrace, lambdas: Sequence[float]
) -> tuple[list[float], float]:
    L = len(clean.z) - 1
    if len(lambdas) != L + 1:
        raise ValueError(f"expected {L + 1} lambdas, got {len(lambdas)}")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambdas must be nonnegative")
    per_layer = []
    for l, lam in enumerate(lambdas):
        if dec.z_hat_bn[l] is None:
            if lam != 0:
                raise ValueError(f"lambda_{l} = {lam} but the decoder has no layer {l}")
            per_layer.append(0.0)
            continue
        B, m = clean.z[l].shape
        diff = clean.z[l] - dec.z_hat_bn[l]
        per_layer.append(float(lam / (B * m) * np.sum(diff * diff)))
    return per_layer, float(sum(per_layer))


def total_cost(c_sup: float, per_layer: Sequence[float] | float) -> CostBreakdown:
    if np.isscalar(per_layer):
        per_layer = (float(per_layer),)
    per_layer = tuple(float(c) for c in per_layer)
    c_den = float(sum(per_layer))
    return CostBreakdown(float(c_sup), per_layer, c_den, float(c_sup) + c_den)
