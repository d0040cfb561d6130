"""MSE-optimal scalar denoisers for Gaussian and Gaussian-mixture priors.

These closed forms are the ground truth the learned denoising functions are
compared against.  Noise is always additive Gaussian: z_tilde = z + n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .decoder import GKind, g_apply, g_backward, g_identity_params
from .training import AdamState, adam_step


@dataclass(frozen=True)
class GaussianPrior:
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("prior std must be nonnegative")


@dataclass(frozen=True)
class MixturePrior:
    components: tuple[tuple[float, float, float], ...]  # (weight, mean, std)

    def __post_init__(self):
        if not self.components:
            raise ValueError("mixture needs at least one component")
        w = np.array([c[0] for c in self.components])
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if any(c[2] <= 0 for c in self.components):
            raise ValueError("mixture component stds must be positive")

    @property
    def weights(self) -> np.ndarray:
        return np.array([c[0] for c in self.components])

    @property
    def means(self) -> np.ndarray:
        return np.array([c[1] for c in self.components])

    @property
    def stds(self) -> np.ndarray:
        return np.array([c[2] for c in self.components])


Prior1D = GaussianPrior | MixturePrior


def as_mixture(prior: Prior1D) -> MixturePrior:
    if isinstance(prior, MixturePrior):
        return prior
    return MixturePrior(((1.0, prior.mean, prior.std),))


def posterior_mean_gaussian(z_tilde, prior_mean: float, sigma_z: float, sigma_n: float):
    if sigma_z < 0 or sigma_n < 0:
        raise ValueError("standard deviations must be nonnegative")
    if sigma_z == 0 and sigma_n == 0:
        raise ValueError("prior and noise std cannot both be zero")
    weight = sigma_z**2 / (sigma_z**2 + sigma_n**2)
    return (np.asarray(z_tilde, dtype=np.float64) - prior_mean) * weight + prior_mean


def posterior_mean_mixture(z_tilde, prior: MixturePrior, sigma_n: float):
    """E[z | z_tilde]: per-component Gaussian posterior means weighted by responsibility."""
    if sigma_n <= 0:
        raise ValueError("noise std must be positive")
    zt = np.asarray(z_tilde, dtype=np.float64)
    w, m, s = prior.weights, prior.means, prior.stds
    var = s**2 + sigma_n**2
    zt_col = zt[..., None]
    log_r = np.log(w) - 0.5 * np.log(2 * np.pi * var) - 0.5 * (zt_col - m) ** 2 / var
    log_r = log_r - logsumexp(log_r, axis=-1, keepdims=True)
    comp_mean = m + (s**2 / var) * (zt_col - m)
    return np.sum(np.exp(log_r) * comp_mean, axis=-1)


def posterior_mean(z_tilde, prior: Prior1D, sigma_n: float):
    if isinstance(prior, GaussianPrior):
        return posterior_mean_gaussian(z_tilde, prior.mean, prior.std, sigma_n)
    return posterior_mean_mixture(z_tilde, prior, sigma_n)


def sample_prior(prior: Prior1D, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw n clean values and the index of the component each came from."""
    mix = as_mixture(prior)
    comp = rng.choice(len(mix.components), size=n, p=mix.weights)
    z = mix.means[comp] + mix.stds[comp] * rng.standard_normal(n)
    return z, comp


def empirical_best_linear(
    prior: Prior1D, sigma_n: float, samples: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Least-squares fit z ~ slope * z_tilde + c on simulated pairs.

    Returns the slope and the center c / (1 - slope), the prior mean implied
    by writing the fit as (z_tilde - center) * slope + center.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    z, _ = sample_prior(prior, samples, rng)
    zt = z + sigma_n * rng.standard_normal(samples)
    zt_c = zt - zt.mean()
    var = np.dot(zt_c, zt_c)
    if var <= 0:
        raise ValueError("corrupted samples have zero variance")
    slope = float(np.dot(zt_c, z - z.mean()) / var)
    c = float(z.mean() - slope * zt.mean())
    center = c / (1.0 - slope) if abs(1.0 - slope) > 1e-12 else float(z.mean())
    return slope, center


@dataclass
class GFit:
    params: np.ndarray
    achieved_mse: float
    oracle_mse: float


def _side_info(u_source, prior: Prior1D, comp: np.ndarray) -> np.ndarray:
    if u_source == "component":
        return as_mixture(prior).means[comp]
    return np.full(comp.shape, float(u_source))


def fit_g_to_oracle(
    kind: GKind,
    prior: Prior1D,
    sigma_n: float,
    u_source: float | str,
    steps: int,
    rng: np.random.Generator,
    samples: int = 20000,
    lr: float = 0.02,
    init: np.ndarray | None = None,
) -> GFit:
    """Fit one unit's denoising function to simulated (z_tilde, u) -> z by Adam.

    ``u_source`` is either a constant or ``"component"``, in which case u is
    the mean of the mixture component that generated z.  The MSEs are measured
    on a fresh sample of the same size.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    z, comp = sample_prior(prior, samples, rng)
    zt = (z + sigma_n * rng.standard_normal(samples))[:, None]
    u = _side_info(u_source, prior, comp)[:, None]
    z = z[:, None]
    p = g_identity_params(kind, 1) if init is None else np.array(init, dtype=np.float64).reshape(-1, 1)
    state = AdamState.fresh(p.size)
    flat = p.ravel().copy()
    for _ in range(steps):
        p = flat.reshape(-1, 1)
        pred = g_apply(kind, zt, u, p)
        _, _, dp = g_backward(kind, zt, u, p, 2.0 * (pred - z) / samples)
        state, flat = adam_step(state, flat, dp.ravel(), lr)
    p = flat.reshape(-1, 1)

    z2, comp2 = sample_prior(prior, samples, rng)
    zt2 = z2 + sigma_n * rng.standard_normal(samples)
    u2 = _side_info(u_source, prior, comp2)
    achieved = float(np.mean((g_apply(kind, zt2[:, None], u2[:, None], p)[:, 0] - z2) ** 2))
    oracle = float(np.mean((posterior_mean(zt2, prior, sigma_n) - z2) ** 2))
    return GFit(flat.copy(), achieved, oracle)


def parse_prior(spec: str) -> Prior1D:
    """``gaussian:MEAN,STD`` or ``mixture:W,M,S;W,M,S;...``."""
    kind, _, body = spec.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "gaussian":
            mean, std = (float(v) for v in body.split(","))
            return GaussianPrior(mean, std)
        if kind == "mixture":
            comps = []
            for part in body.split(";"):
                w, m, s = (float(v) for v in part.split(","))
                comps.append((w, m, s))
            return MixturePrior(tuple(comps))
    except ValueError as e:
        raise ValueError(f"bad prior spec {spec!r}: {e}") from None
    raise ValueError(f"bad prior spec {spec!r}: expected 'gaussian:' or 'mixture:'")


def format_prior(prior: Prior1D) -> str:
    if isinstance(prior, GaussianPrior):
        return f"gaussian:{prior.mean!r},{prior.std!r}"
    return "mixture:" + ";".join(f"{w!r},{m!r},{s!r}" for w, m, s in prior.components)


def grid_values(lo: float, hi: float, n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("grid needs at least 2 points")
    return np.linspace(lo, hi, n)

