"""Denoising decoder: vertical projections and unit-wise denoising functions.

Each denoising function maps the lateral corrupted value ``z_tilde`` and the
top-down signal ``u`` to a reconstruction.  Parameters for a layer of width m
are stored as an ``(n_params, m)`` array, so row k holds parameter k of every
unit and evaluation broadcasts over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .batchnorm import BatchStats, batch_statistics, normalize
from .encoder import CleanTrace, CorruptedTrace
from .numerics import Matrix, ShapeError, matmul, sigmoid


class GKind(str, Enum):
    PROPOSED = "proposed"
    MINI_MLP = "mini_mlp"
    NO_AUGMENTED = "no_augmented"
    LINEAR = "linear"
    ADDITIVE_U = "additive_u"


G_PARAM_COUNT = {
    GKind.PROPOSED: 10,
    GKind.MINI_MLP: 9,
    GKind.NO_AUGMENTED: 7,
    GKind.LINEAR: 4,
    GKind.ADDITIVE_U: 9,
}


def g_identity_params(kind: GKind, width: int) -> np.ndarray:
    """Parameters for which g(z_tilde, u) = z_tilde."""
    p = np.zeros((G_PARAM_COUNT[kind], width))
    if kind is GKind.PROPOSED:
        p[1] = 1.0  # a2
        p[6] = 1.0  # a7
        p[9] = 1.0  # a10
    elif kind in (GKind.MINI_MLP, GKind.NO_AUGMENTED, GKind.LINEAR):
        p[1] = 1.0  # weight on z_tilde in the linear part
    elif kind is GKind.ADDITIVE_U:
        p[4] = 1.0  # a5
    return p


def _features(kind: GKind, z, u):
    one = np.ones_like(z)
    if kind is GKind.NO_AUGMENTED:
        return [one, z, u]
    return [one, z, u, z * u]


def g_apply(kind: GKind, z_tilde, u, p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] != G_PARAM_COUNT[kind]:
        raise ShapeError(f"{kind.value} takes {G_PARAM_COUNT[kind]} parameters, got {p.shape[0]}")
    z = np.asarray(z_tilde, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if kind is GKind.PROPOSED:
        a = p
        mu = a[0] * sigmoid(a[1] * u + a[2]) + a[3] * u + a[4]
        v = a[5] * sigmoid(a[6] * u + a[7]) + a[8] * u + a[9]
        return (z - mu) * v + mu
    if kind is GKind.ADDITIVE_U:
        a = p
        return (
            a[0] * u
            + a[1] * sigmoid(a[2] * u + a[3])
            + a[4] * z
            + a[5] * sigmoid(a[6] * z + a[7])
            + a[8]
        )
    xi = _features(kind, z, u)
    n = len(xi)
    lin = sum(p[k] * xi[k] for k in range(n))
    if kind is GKind.LINEAR:
        return lin
    b, c = p[n], p[n + 1 :]
    s = sigmoid(sum(c[k] * xi[k] for k in range(n)))
    return lin + b * s


def g_backward(kind: GKind, z_tilde: Matrix, u: Matrix, p: np.ndarray, d_out: Matrix):
    """Adjoint of ``g_apply`` on a (B, m) batch.

    Returns (d_z_tilde, d_u, d_p) with d_p summed over the batch, shaped like p.
    """
    z, d = z_tilde, d_out
    dp = np.empty_like(p)
    if kind is GKind.PROPOSED:
        a = p
        s1 = sigmoid(a[1] * u + a[2])
        s2 = sigmoid(a[6] * u + a[7])
        ds1 = s1 * (1.0 - s1)
        ds2 = s2 * (1.0 - s2)
        mu = a[0] * s1 + a[3] * u + a[4]
        v = a[5] * s2 + a[8] * u + a[9]
        d_mu = d * (1.0 - v)
        d_v = d * (z - mu)
        dp[0] = (d_mu * s1).sum(0)
        dp[1] = (d_mu * a[0] * ds1 * u).sum(0)
        dp[2] = (d_mu * a[0] * ds1).sum(0)
        dp[3] = (d_mu * u).sum(0)
        dp[4] = d_mu.sum(0)
        dp[5] = (d_v * s2).sum(0)
        dp[6] = (d_v * a[5] * ds2 * u).sum(0)
        dp[7] = (d_v * a[5] * ds2).sum(0)
        dp[8] = (d_v * u).sum(0)
        dp[9] = d_v.sum(0)
        d_z = d * v
        d_u = d_mu * (a[0] * ds1 * a[1] + a[3]) + d_v * (a[5] * ds2 * a[6] + a[8])
        return d_z, d_u, dp
    if kind is GKind.ADDITIVE_U:
        a = p
        s1 = sigmoid(a[2] * u + a[3])
        s2 = sigmoid(a[6] * z + a[7])
        ds1 = s1 * (1.0 - s1)
        ds2 = s2 * (1.0 - s2)
        dp[0] = (d * u).sum(0)
        dp[1] = (d * s1).sum(0)
        dp[2] = (d * a[1] * ds1 * u).sum(0)
        dp[3] = (d * a[1] * ds1).sum(0)
        dp[4] = (d * z).sum(0)
        dp[5] = (d * s2).sum(0)
        dp[6] = (d * a[5] * ds2 * z).sum(0)
        dp[7] = (d * a[5] * ds2).sum(0)
        dp[8] = d.sum(0)
        d_z = d * (a[4] + a[5] * ds2 * a[6])
        d_u = d * (a[0] + a[1] * ds1 * a[2])
        return d_z, d_u, dp
    xi = _features(kind, z, u)
    n = len(xi)
    # d g / d xi_k, then chain through xi = [1, z, u, (z*u)].
    if kind is GKind.LINEAR:
        d_xi = [d * p[k] for k in range(n)]
        for k in range(n):
            dp[k] = (d * xi[k]).sum(0)
    else:
        b, c = p[n], p[n + 1 :]
        s = sigmoid(sum(c[k] * xi[k] for k in range(n)))
        ds = s * (1.0 - s)
        for k in range(n):
            dp[k] = (d * xi[k]).sum(0)
            dp[n + 1 + k] = (d * b * ds * xi[k]).sum(0)
        dp[n] = (d * s).sum(0)
        d_xi = [d * (p[k] + b * ds * c[k]) for k in range(n)]
    d_z = d_xi[1]
    d_u = d_xi[2]
    if n == 4:
        d_z = d_z + d_xi[3] * u
        d_u = d_u + d_xi[3] * z
    return d_z, d_u, dp


@dataclass
class DecoderParams:
    """``V[l-1]`` is V^(l) of shape (m_l, m_{l-1}); ``g[l]`` holds layer l's unit params.

    Entries are None for layers a reduced decoder omits.
    """

    kind: GKind
    V: list[Matrix | None]
    g: list[np.ndarray | None]

    @property
    def depth(self) -> int:
        return len(self.g) - 1

    @property
    def top_only(self) -> bool:
        return all(v is None for v in self.V) and all(gl is None for gl in self.g[:-1])


def init_decoder(widths: list[int], kind: GKind, rng: np.random.Generator) -> DecoderParams:
    V = []
    for l in range(1, len(widths)):
        fan_in = widths[l]
        V.append(rng.standard_normal((widths[l], widths[l - 1])) / np.sqrt(fan_in))
    g = [g_identity_params(kind, w) for w in widths]
    return DecoderParams(kind, V, g)


def gamma_subset(dec: DecoderParams) -> DecoderParams:
    """Reduced decoder that keeps only the top-layer denoising parameters."""
    L = dec.depth
    return DecoderParams(dec.kind, [None] * L, [None] * L + [dec.g[L].copy()])


def param_count(dec: DecoderParams) -> int:
    return sum(v.size for v in dec.V if v is not None) + sum(
        gl.size for gl in dec.g if gl is not None
    )


@dataclass
class DecoderTrace:
    u_pre: list[Matrix | None]
    u_stats: list[BatchStats | None]
    u: list[Matrix | None]
    z_hat: list[Matrix | None]
    z_hat_bn: list[Matrix | None]


U_TOP_MODES = ("batchnorm", "raw")


def decoder_pass(
    dec: DecoderParams,
    corrupted: CorruptedTrace,
    clean: CleanTrace,
    u_top_mode: str = "batchnorm",
) -> DecoderTrace:
    L = dec.depth
    if len(corrupted.z) != L + 1 or len(clean.z) != L + 1:
        raise ShapeError("traces and decoder have different depths")
    if u_top_mode not in U_TOP_MODES:
        raise ValueError(f"unknown u_top_mode {u_top_mode!r}")
    u_pre = [None] * (L + 1)
    u_stats = [None] * (L + 1)
    u = [None] * (L + 1)
    z_hat = [None] * (L + 1)
    z_hat_bn = [None] * (L + 1)
    for l in range(L, -1, -1):
        if dec.g[l] is None:
            break
        if l == L:
            u_pre[l] = corrupted.h[L]
        else:
            if dec.V[l] is None:
                raise ShapeError(f"decoder has denoiser params at layer {l} but no V^({l + 1})")
            u_pre[l] = matmul(z_hat[l + 1], dec.V[l])
        if l == L and u_top_mode == "raw":
            u[l] = u_pre[l]
        else:
            u_stats[l] = batch_statistics(u_pre[l])
            u[l] = normalize(u_pre[l], u_stats[l])
        if dec.g[l].shape[1] != corrupted.z[l].shape[1]:
            raise ShapeError(f"layer {l}: denoiser width {dec.g[l].shape[1]} "
                             f"vs activations {corrupted.z[l].shape[1]}")
        z_hat[l] = g_apply(dec.kind, corrupted.z[l], u[l], dec.g[l])
        if l == 0:
            z_hat_bn[l] = z_hat[l]
        else:
            z_hat_bn[l] = normalize(z_hat[l], clean.stats[l])
    return DecoderTrace(u_pre, u_stats, u, z_hat, z_hat_bn)
