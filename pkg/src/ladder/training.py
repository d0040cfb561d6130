"""Forward cost, exact gradients, Adam and the semi-supervised training loop."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .batchnorm import RunningStats, ema_update, normalize_backward
from .data import BatchSampler, Dataset, LabeledSplit
from .decoder import (
    U_TOP_MODES,
    DecoderParams,
    DecoderTrace,
    GKind,
    decoder_pass,
    g_backward,
    gamma_subset,
    init_decoder,
)
from .encoder import (
    CleanTrace,
    CorruptedTrace,
    EncoderParams,
    LayerSpec,
    activation_backward,
    clean_pass,
    corrupted_pass,
    init_encoder,
    make_layers,
    predict,
    predict_batch_stats,
    preactivation,
)
from .numerics import Matrix, NonFiniteError, substream
from .objective import CostBreakdown, denoising_cost, supervised_cost, supervised_cost_grad, total_cost

# Test hook: scales the first weight gradient so gradient checks can be shown to fail.
ADJOINT_FAULT_SCALE = 1.0

CHECKPOINT_VERSION = 1


@dataclass
class LadderParams:
    encoder: EncoderParams
    decoder: DecoderParams

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in the fixed flattening order."""
        enc, dec = self.encoder, self.decoder
        out = []
        for l in range(1, enc.depth + 1):
            out.append((f"W{l}", enc.W[l - 1]))
            if enc.gamma[l - 1] is not None:
                out.append((f"gamma{l}", enc.gamma[l - 1]))
            if enc.beta[l - 1] is not None:
                out.append((f"beta{l}", enc.beta[l - 1]))
        for l in range(1, dec.depth + 1):
            if dec.V[l - 1] is not None:
                out.append((f"V{l}", dec.V[l - 1]))
        for l in range(dec.depth + 1):
            if dec.g[l] is not None:
                out.append((f"g{l}", dec.g[l]))
        return out

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "LadderParams":
        enc, dec = self.encoder, self.decoder
        opt = lambda a: None if a is None else fn(a)  # noqa: E731
        return LadderParams(
            EncoderParams(list(enc.layers), [fn(w) for w in enc.W],
                          [opt(g) for g in enc.gamma], [opt(b) for b in enc.beta]),
            DecoderParams(dec.kind, [opt(v) for v in dec.V], [opt(g) for g in dec.g]),
        )

    def copy(self) -> "LadderParams":
        return self.map(np.copy)

    def zeros_like(self) -> "LadderParams":
        return self.map(np.zeros_like)


def param_index(params: LadderParams) -> list[tuple[str, int, tuple[int, ...]]]:
    """(name, offset, shape) for every trainable array."""
    out, offset = [], 0
    for name, a in params.named_arrays():
        out.append((name, offset, a.shape))
        offset += a.size
    return out


def flatten(params: LadderParams) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in params.named_arrays()])


def unflatten(template: LadderParams, flat: np.ndarray) -> LadderParams:
    flat = np.asarray(flat, dtype=np.float64)
    out = template.copy()
    offset = 0
    for _, a in out.named_arrays():
        a[...] = flat[offset : offset + a.size].reshape(a.shape)
        offset += a.size
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, parameters need {offset}")
    return out


def init_params(layers: list[LayerSpec], kind: GKind, seed: int, gamma_model: bool = False) -> LadderParams:
    enc = init_encoder(layers, substream(seed, "init/encoder"))
    dec = init_decoder([s.width for s in layers], kind, substream(seed, "init/decoder"))
    if gamma_model:
        dec = gamma_subset(dec)
    return LadderParams(enc, dec)


@dataclass
class Traces:
    clean: CleanTrace
    corrupted: CorruptedTrace
    decoder: DecoderTrace


def forward_cost(
    params: LadderParams,
    x: Matrix,
    targets: Sequence[int],
    labeled_mask: Sequence[bool],
    rng: np.random.Generator | None = None,
    frozen_noise: Sequence[Matrix] | None = None,
    u_top_mode: str = "batchnorm",
) -> tuple[CostBreakdown, Traces]:
    enc = params.encoder
    clean = clean_pass(enc, x)
    corrupted = corrupted_pass(enc, x, rng=rng, noise=frozen_noise)
    dtrace = decoder_pass(params.decoder, corrupted, clean, u_top_mode)
    c_sup = supervised_cost(corrupted.y, targets, labeled_mask)
    per_layer, _ = denoising_cost(clean, dtrace, [s.lam for s in enc.layers])
    return total_cost(c_sup, per_layer), Traces(clean, corrupted, dtrace)


def _acc(a, b):
    return b if a is None else a + b


def backward(
    params: LadderParams,
    traces: Traces,
    targets: Sequence[int],
    labeled_mask: Sequence[bool],
    lambdas: Sequence[float] | None = None,
) -> LadderParams:
    """Gradient of the total cost w.r.t. every trainable array.

    Batch statistics are differentiated as functions of the batch, and the
    clean pass receives gradient through its role as denoising target.
    Adjoints that are identically zero are carried as None and skipped.
    """
    enc, dec = params.encoder, params.decoder
    clean, cor, dtr = traces.clean, traces.corrupted, traces.decoder
    L = enc.depth
    if lambdas is None:
        lambdas = [s.lam for s in enc.layers]
    if len(lambdas) != L + 1 or dec.depth != L:
        raise ValueError("parameter, trace and lambda depths disagree")
    grad = params.zeros_like()

    d_clean = [None] * (L + 1)
    d_mu = [None] * (L + 1)
    d_sigma = [None] * (L + 1)
    d_ztilde = [None] * (L + 1)
    d_zhat = [None] * (L + 1)
    d_htop = None

    # Decoder, bottom to top (reverse of its evaluation order).
    for l in range(L + 1):
        if dtr.z_hat[l] is None:
            continue
        lam = lambdas[l]
        if lam != 0:
            B, m = clean.z[l].shape
            r = (2.0 * lam / (B * m)) * (clean.z[l] - dtr.z_hat_bn[l])
            d_clean[l] = _acc(d_clean[l], r)
            if l == 0:
                d_zhat[0] = _acc(d_zhat[0], -r)
            else:
                st = clean.stats[l]
                d_zhat[l] = _acc(d_zhat[l], -r / st.std)
                d_mu[l] = r.sum(axis=0) / st.std
                d_sigma[l] = (r * dtr.z_hat_bn[l]).sum(axis=0) / st.std
        if d_zhat[l] is None:
            continue
        dz, du, dp = g_backward(dec.kind, cor.z[l], dtr.u[l], dec.g[l], d_zhat[l])
        grad.decoder.g[l][...] = dp
        d_ztilde[l] = _acc(d_ztilde[l], dz)
        if dtr.u_stats[l] is not None:
            du = normalize_backward(dtr.u[l], dtr.u_stats[l], du)
        if l == L:
            d_htop = du
        else:
            grad.decoder.V[l][...] = dtr.z_hat[l + 1].T @ du
            d_zhat[l + 1] = _acc(d_zhat[l + 1], du @ dec.V[l].T)

    # Corrupted encoder, top to bottom.
    d_h = None
    if np.any(labeled_mask):
        d_h = supervised_cost_grad(cor.y, targets, labeled_mask)
    if d_htop is not None:
        d_h = _acc(d_h, d_htop)
    _encoder_backward(enc, grad.encoder, cor.z, cor.h, cor.z_norm, cor.stats, d_h, d_ztilde, None, None)

    # Clean encoder: gradient enters only through the denoising targets.
    _encoder_backward(enc, grad.encoder, clean.z, clean.h, clean.z, clean.stats, None, d_clean, d_mu, d_sigma)

    if ADJOINT_FAULT_SCALE != 1.0:
        grad.encoder.W[0] *= ADJOINT_FAULT_SCALE
    return grad


def _encoder_backward(enc, genc, z, h, z_norm, stats, d_h, d_z, d_mu, d_sigma):
    L = enc.depth
    for l in range(L, 0, -1):
        if d_h is not None:
            kind = enc.layers[l].activation
            a = preactivation(enc, l, z[l])
            da = activation_backward(kind, a, h[l], d_h)
            gamma, beta = enc.gamma[l - 1], enc.beta[l - 1]
            if gamma is not None:
                zb = z[l] if beta is None else z[l] + beta
                genc.gamma[l - 1] += (da * zb).sum(axis=0)
                da = da * gamma
            if beta is not None:
                genc.beta[l - 1] += da.sum(axis=0)
            d_z[l] = _acc(d_z[l], da)
        dm = d_mu[l] if d_mu is not None else None
        ds = d_sigma[l] if d_sigma is not None else None
        if d_z[l] is None and dm is None and ds is None:
            d_h = None
            continue
        dzl = d_z[l] if d_z[l] is not None else np.zeros_like(z[l])
        d_pre = normalize_backward(z_norm[l], stats[l], dzl, dm, ds)
        genc.W[l - 1] += h[l - 1].T @ d_pre
        d_h = d_pre @ enc.W[l - 1].T if l > 1 else None


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float) -> tuple[AdamState, np.ndarray]:
    if not (state.m.shape == params.shape == grad.shape):
        raise ValueError(f"length mismatch: state {state.m.shape}, params {params.shape}, grad {grad.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.beta1, state.beta2, state.eps), new


# -- configuration and loop -----------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    widths: tuple[int, ...]
    lambdas: tuple[float, ...]
    noise_stds: tuple[float, ...]
    g_kind: GKind = GKind.PROPOSED
    learning_rate: float = 0.002
    main_epochs: int = 100
    anneal_epochs: int = 50
    batch_labeled: int = 100
    batch_unlabeled: int = 100
    seed: int = 0
    eval_stats_decay: float = 0.99
    eval_stats_mode: str = "running"
    u_top_mode: str = "batchnorm"
    gamma_model: bool = False
    steps_per_epoch: int = 0
    include_labeled_in_pool: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        L = len(self.widths) - 1
        if L < 1:
            raise ValueError("architecture needs at least two widths")
        if len(self.lambdas) != L + 1:
            raise ValueError(f"lambda vector needs {L + 1} entries, got {len(self.lambdas)}")
        if len(self.noise_stds) != L + 1:
            raise ValueError(f"noise std vector needs {L + 1} entries, got {len(self.noise_stds)}")
        if self.batch_labeled < 0 or self.batch_unlabeled < 0 or self.batch_labeled + self.batch_unlabeled < 2:
            raise ValueError("batch_labeled + batch_unlabeled must be at least 2")
        if self.main_epochs < 0 or self.anneal_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.eval_stats_mode not in ("running", "batch"):
            raise ValueError(f"eval_stats_mode must be 'running' or 'batch', got {self.eval_stats_mode!r}")
        if self.u_top_mode not in U_TOP_MODES:
            raise ValueError(f"u_top_mode must be one of {U_TOP_MODES}, got {self.u_top_mode!r}")
        if self.gamma_model and any(lam != 0 for lam in self.lambdas[:-1]):
            raise ValueError("the top-only decoder requires lambda_l = 0 below the top layer")

    @property
    def total_epochs(self) -> int:
        return self.main_epochs + self.anneal_epochs

    def layers(self) -> list[LayerSpec]:
        return make_layers(self.widths, self.noise_stds, self.lambdas)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Constant rate, then a linear ramp to zero over the annealing epochs."""
    total = config.total_epochs
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if epoch < config.main_epochs:
        return config.learning_rate
    return config.learning_rate * (total - epoch) / config.anneal_epochs


def error_rate(
    params: LadderParams,
    x: Matrix,
    labels: np.ndarray,
    eval_stats: Sequence[RunningStats],
    mode: str = "running",
) -> float:
    if x.shape[0] == 0:
        return float("nan")
    if mode == "batch":
        _, classes = predict_batch_stats(params.encoder, x)
    else:
        _, classes = predict(params.encoder, x, eval_stats)
    return float(np.mean(classes != labels))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    cost_supervised: float
    cost_denoise: list[float]
    train_err: float | None
    val_err: float | None

    def as_dict(self) -> dict:
        d = {"epoch": self.epoch, "lr": self.lr, "cost_supervised": self.cost_supervised}
        for l, c in enumerate(self.cost_denoise):
            d[f"cost_denoise_l{l}"] = c
        d["train_err"] = self.train_err
        d["val_err"] = self.val_err
        return d


@dataclass
class TrainState:
    params: LadderParams
    eval_stats: list[RunningStats]
    adam: AdamState
    epoch: int = 0
    metrics: list[EpochRecord] = field(default_factory=list)


def train(
    config: TrainConfig,
    dataset: Dataset,
    split: LabeledSplit,
    init: LadderParams | None = None,
    on_epoch: Callable[[EpochRecord, TrainState], None] | None = None,
) -> TrainState:
    """Run the full schedule.  Every random choice derives from ``config.seed``."""
    if split.labeled_idx.size == 0 and config.batch_labeled > 0:
        raise ValueError("batch_labeled > 0 but the split has no labeled rows")
    layers = config.layers()
    params = init.copy() if init is not None else init_params(
        layers, config.g_kind, config.seed, config.gamma_model)
    eval_stats = [RunningStats(decay=config.eval_stats_decay) for _ in layers[1:]]
    flat = flatten(params)
    adam = AdamState.fresh(flat.size, config.adam_beta1, config.adam_beta2, config.adam_eps)
    state = TrainState(params, eval_stats, adam)

    sampler = BatchSampler(
        split, dataset, config.batch_labeled, config.batch_unlabeled,
        substream(config.seed, "data/batches"), config.include_labeled_in_pool, config.steps_per_epoch,
    )
    noise_rng = substream(config.seed, "noise/encoder")
    labels = dataset.labels
    x_lab, y_lab = dataset.inputs[split.labeled_idx], labels[split.labeled_idx]
    x_val, y_val = dataset.inputs[split.validation_idx], labels[split.validation_idx]
    L = len(layers) - 1

    for epoch in range(config.total_epochs):
        lr = lr_schedule(epoch, config)
        sums = np.zeros(L + 2)
        steps = 0
        for x, targets, mask in sampler.epoch():
            cost, traces = forward_cost(state.params, x, targets, mask, rng=noise_rng,
                                        u_top_mode=config.u_top_mode)
            if not np.isfinite(cost.total):
                raise NonFiniteError(f"non-finite cost at epoch {epoch}")
            g = flatten(backward(state.params, traces, targets, mask))
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient at epoch {epoch}")
            state.adam, flat = adam_step(state.adam, flat, g, lr)
            state.params = unflatten(state.params, flat)
            state.eval_stats = [ema_update(r, st) for r, st in zip(state.eval_stats, traces.clean.stats[1:])]
            sums += np.array([cost.c_supervised, *cost.c_denoise_per_layer])
            steps += 1
        means = sums / max(steps, 1)
        record = EpochRecord(
            epoch,
            lr,
            float(means[0]),
            [float(c) for c in means[1:]],
            _maybe_err(state, x_lab, y_lab, config.eval_stats_mode),
            _maybe_err(state, x_val, y_val, config.eval_stats_mode),
        )
        state.epoch = epoch + 1
        state.metrics.append(record)
        if on_epoch is not None:
            on_epoch(record, state)
    return state


def _maybe_err(state: TrainState, x, y, mode):
    if x.shape[0] == 0 or (mode == "running" and not all(r.populated for r in state.eval_stats)):
        return None
    if mode == "batch" and x.shape[0] < 2:
        return None
    return error_rate(state.params, x, y, state.eval_stats, mode)


# -- checkpoints -----------------------------------------------------------------


def checkpoint_dict(state: TrainState, config_text: str) -> dict:
    index = param_index(state.params)
    a = state.adam
    return {
        "format": "ladder-checkpoint",
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "config": config_text,
        "params": {
            "names": [n for n, _, _ in index],
            "shapes": [list(s) for _, _, s in index],
            "values": flatten(state.params).tolist(),
        },
        "eval_stats": [
            {
                "mean": None if r.mean is None else r.mean.tolist(),
                "std": None if r.std is None else r.std.tolist(),
                "decay": r.decay,
                "update_count": r.update_count,
            }
            for r in state.eval_stats
        ],
        "adam": {"m": a.m.tolist(), "v": a.v.tolist(), "t": a.t,
                 "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps},
    }


def save_checkpoint(path: str | Path, state: TrainState, config_text: str) -> None:
    """Write atomically so an interrupted write never replaces a good file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump(checkpoint_dict(state, config_text), f)
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path: str | Path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != "ladder-checkpoint" or "version" not in doc:
        raise CheckpointError(f"{path} is not a ladder checkpoint")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc['version']} is not supported (this build reads version {CHECKPOINT_VERSION})"
        )
    return doc


def restore_state(doc: dict, template: LadderParams) -> TrainState:
    try:
        index = param_index(template)
        names = [n for n, _, _ in index]
        shapes = [list(s) for _, _, s in index]
        if doc["params"]["names"] != names or doc["params"]["shapes"] != shapes:
            raise CheckpointError("checkpoint parameter layout does not match its configuration")
        params = unflatten(template, np.array(doc["params"]["values"], dtype=np.float64))
        stats = []
        for r in doc["eval_stats"]:
            mean = None if r["mean"] is None else np.array(r["mean"], dtype=np.float64)
            std = None if r["std"] is None else np.array(r["std"], dtype=np.float64)
            stats.append(RunningStats(mean, std, float(r["decay"]), int(r["update_count"])))
        if len(stats) != template.encoder.depth:
            raise CheckpointError("checkpoint has the wrong number of evaluation statistics")
        a = doc["adam"]
        adam = AdamState(np.array(a["m"], dtype=np.float64), np.array(a["v"], dtype=np.float64),
                         int(a["t"]), float(a["beta1"]), float(a["beta2"]), float(a["eps"]))
        if adam.m.shape != flatten(params).shape or adam.v.shape != adam.m.shape:
            raise CheckpointError("optimizer state does not match parameter count")
        if not np.all(np.isfinite(flatten(params))):
            raise CheckpointError("checkpoint parameters are not finite")
        return TrainState(params, stats, adam, int(doc["epoch"]))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {e}") from None

