"""Fully connected encoder: clean and corrupted passes, prediction."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .batchnorm import BatchStats, RunningStats, batch_statistics, normalize
from .numerics import Matrix, ShapeError, gaussian_sample, matmul, relu, softmax_rows


class Activation(str, Enum):
    RELU = "relu"
    SOFTMAX = "softmax"
    LINEAR = "linear"


@dataclass(frozen=True)
class LayerSpec:
    """One level of the ladder.  Level 0 is the input and has no activation."""

    width: int
    activation: Activation = Activation.LINEAR
    noise_std: float = 0.0
    lam: float = 0.0

    # ReLU needs no scale, linear needs neither, softmax needs both.
    @property
    def use_gamma(self) -> bool:
        return self.activation is Activation.SOFTMAX

    @property
    def use_beta(self) -> bool:
        return self.activation in (Activation.RELU, Activation.SOFTMAX)


def make_layers(
    widths: Sequence[int],
    noise_stds: Sequence[float],
    lambdas: Sequence[float],
    top: Activation = Activation.SOFTMAX,
    hidden: Activation = Activation.RELU,
) -> list[LayerSpec]:
    L = len(widths) - 1
    if L < 1:
        raise ValueError("need at least an input and an output width")
    if len(noise_stds) != L + 1 or len(lambdas) != L + 1:
        raise ValueError(
            f"expected {L + 1} noise stds and lambdas, got {len(noise_stds)} and {len(lambdas)}"
        )
    if any(s < 0 for s in noise_stds):
        raise ValueError("noise stds must be nonnegative")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambdas must be nonnegative")
    layers = [LayerSpec(int(widths[0]), Activation.LINEAR, float(noise_stds[0]), float(lambdas[0]))]
    for l in range(1, L + 1):
        act = top if l == L else hidden
        if act is Activation.SOFTMAX and l != L:
            raise ValueError("softmax is only allowed on the top layer")
        layers.append(LayerSpec(int(widths[l]), act, float(noise_stds[l]), float(lambdas[l])))
    return layers


@dataclass
class EncoderParams:
    layers: list[LayerSpec]
    W: list[Matrix]
    gamma: list[np.ndarray | None]
    beta: list[np.ndarray | None]

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def widths(self) -> list[int]:
        return [s.width for s in self.layers]


def init_encoder(layers: list[LayerSpec], rng: np.random.Generator) -> EncoderParams:
    W, gamma, beta = [], [], []
    for l in range(1, len(layers)):
        fan_in, width = layers[l - 1].width, layers[l].width
        W.append(rng.standard_normal((fan_in, width)) / np.sqrt(fan_in))
        gamma.append(np.ones(width) if layers[l].use_gamma else None)
        beta.append(np.zeros(width) if layers[l].use_beta else None)
    return EncoderParams(list(layers), W, gamma, beta)


def preactivation(params: EncoderParams, l: int, z: Matrix) -> Matrix:
    """gamma * (z + beta) for layer ``l`` with omitted terms as identity."""
    a = z
    if params.beta[l - 1] is not None:
        a = a + params.beta[l - 1]
    if params.gamma[l - 1] is not None:
        a = a * params.gamma[l - 1]
    return a


def activate(kind: Activation, a: Matrix) -> Matrix:
    if kind is Activation.RELU:
        return relu(a)
    if kind is Activation.SOFTMAX:
        return softmax_rows(a)
    return a


def activation_backward(kind: Activation, a: Matrix, h: Matrix, d_h: Matrix) -> Matrix:
    if kind is Activation.RELU:
        return d_h * (a > 0)
    if kind is Activation.SOFTMAX:
        return h * (d_h - (d_h * h).sum(axis=1, keepdims=True))
    return d_h


@dataclass
class CleanTrace:
    z_pre: list[Matrix | None]
    stats: list[BatchStats | None]
    z: list[Matrix]
    h: list[Matrix]

    @property
    def y(self) -> Matrix:
        return self.h[-1]


@dataclass
class CorruptedTrace:
    z_pre: list[Matrix | None]
    stats: list[BatchStats | None]
    z_norm: list[Matrix | None]
    z: list[Matrix]
    h: list[Matrix]
    noise: list[Matrix]

    @property
    def y(self) -> Matrix:
        return self.h[-1]


def _check_input(params: EncoderParams, x: Matrix) -> None:
    if x.ndim != 2 or x.shape[1] != params.layers[0].width:
        raise ShapeError(f"input of shape {x.shape} does not match width {params.layers[0].width}")
    if x.shape[0] < 2:
        raise ValueError("batch normalization needs a batch of at least 2 rows")


def clean_pass(
    params: EncoderParams, x: Matrix, fixed_stats: Sequence[BatchStats] | None = None
) -> CleanTrace:
    """Noise-free pass.  ``fixed_stats`` (layers 1..L) replaces batch statistics."""
    if fixed_stats is None:
        _check_input(params, x)
    elif x.ndim != 2 or x.shape[1] != params.layers[0].width:
        raise ShapeError(f"input of shape {x.shape} does not match width {params.layers[0].width}")
    z_pre: list[Matrix | None] = [None]
    stats: list[BatchStats | None] = [None]
    z, h = [x], [x]
    for l in range(1, params.depth + 1):
        zp = matmul(h[-1], params.W[l - 1])
        st = batch_statistics(zp) if fixed_stats is None else fixed_stats[l - 1]
        zl = normalize(zp, st)
        z_pre.append(zp)
        stats.append(st)
        z.append(zl)
        h.append(activate(params.layers[l].activation, preactivation(params, l, zl)))
    return CleanTrace(z_pre, stats, z, h)


def draw_noise(params: EncoderParams, batch: int, rng: np.random.Generator) -> list[Matrix]:
    return [gaussian_sample(rng, batch, s.width, s.noise_std) for s in params.layers]


def corrupted_pass(
    params: EncoderParams,
    x: Matrix,
    rng: np.random.Generator | None = None,
    noise: Sequence[Matrix] | None = None,
) -> CorruptedTrace:
    """Pass with Gaussian noise added to the input and after every normalization.

    Either ``rng`` (fresh noise, drawn layer by layer from 0 to L) or a stored
    ``noise`` list for replay must be given.
    """
    _check_input(params, x)
    if noise is None:
        if rng is None:
            raise ValueError("corrupted_pass needs either an rng or stored noise")
        noise = draw_noise(params, x.shape[0], rng)
    noise = list(noise)
    if len(noise) != params.depth + 1:
        raise ShapeError(f"expected {params.depth + 1} noise matrices, got {len(noise)}")
    z0 = x + noise[0]
    z_pre: list[Matrix | None] = [None]
    stats: list[BatchStats | None] = [None]
    z_norm: list[Matrix | None] = [None]
    z, h = [z0], [z0]
    for l in range(1, params.depth + 1):
        zp = matmul(h[-1], params.W[l - 1])
        st = batch_statistics(zp)
        zn = normalize(zp, st)
        zl = zn + noise[l]
        z_pre.append(zp)
        stats.append(st)
        z_norm.append(zn)
        z.append(zl)
        h.append(activate(params.layers[l].activation, preactivation(params, l, zl)))
    return CorruptedTrace(z_pre, stats, z_norm, z, h, noise)


def predict(
    params: EncoderParams, x: Matrix, eval_stats: Sequence[RunningStats]
) -> tuple[Matrix, np.ndarray]:
    """Clean-path class probabilities and argmax classes using running statistics."""
    if len(eval_stats) != params.depth or not all(r.populated for r in eval_stats):
        raise ValueError("evaluation statistics are not populated for every layer")
    trace = clean_pass(params, x, [r.as_batch_stats() for r in eval_stats])
    # np.argmax returns the first maximum, i.e. ties go to the lowest index.
    return trace.y, np.argmax(trace.y, axis=1)


def predict_batch_stats(params: EncoderParams, x: Matrix) -> tuple[Matrix, np.ndarray]:
    """Like ``predict`` but normalizing with the statistics of ``x`` itself."""
    trace = clean_pass(params, x)
    return trace.y, np.argmax(trace.y, axis=1)
