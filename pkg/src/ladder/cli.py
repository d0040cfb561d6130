"""Command line: ``ladder train | eval | gradcheck | denoise-demo``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite cost; the last good checkpoint is kept).
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import training
from .config import ConfigError, RunConfig, format_config, load_config, parse_config
from .data import (
    Dataset,
    IdxError,
    load_csv_dataset,
    load_idx_dataset,
    make_split,
    synth_mixture,
)
from .decoder import GKind, g_apply
from .encoder import draw_noise, make_layers, predict, predict_batch_stats
from .numerics import NonFiniteError, finite_diff_gradient, make_rng, substream
from .oracle import fit_g_to_oracle, grid_values, parse_prior, posterior_mean
from .training import (
    CheckpointError,
    TrainState,
    backward,
    error_rate,
    flatten,
    forward_cost,
    init_params,
    param_index,
    read_checkpoint,
    restore_state,
    save_checkpoint,
    train,
    unflatten,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
GRADCHECK_MAX_PARAMS = 5000


class DataError(Exception):
    pass


def resolve_config_path(name: str) -> tuple[Path, bool]:
    """A filesystem path, or the name of a config shipped with the package.

    The flag is True for shipped configs, whose relative paths resolve
    against the working directory instead of the config's own directory.
    """
    p = Path(name)
    if p.exists():
        return p, False
    shipped = resources.files("ladder") / "configs" / name
    if shipped.is_file():
        return Path(str(shipped)), True
    return p, False


def _path(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_datasets(cfg: RunConfig, base: Path) -> tuple[Dataset, Dataset | None]:
    try:
        if cfg.dataset == "mnist":
            if not (cfg.train_images and cfg.train_labels):
                raise DataError("mnist dataset needs train_images and train_labels")
            k = cfg.arch[-1]
            train_ds = load_idx_dataset(_path(base, cfg.train_images), _path(base, cfg.train_labels), k)
            test_ds = None
            if cfg.test_images:
                test_ds = load_idx_dataset(_path(base, cfg.test_images), _path(base, cfg.test_labels), k)
            return train_ds, test_ds
        if cfg.dataset == "csv":
            if not cfg.train_csv:
                raise DataError("csv dataset needs train_csv")
            train_ds = load_csv_dataset(_path(base, cfg.train_csv))
            test_ds = load_csv_dataset(_path(base, cfg.test_csv)) if cfg.test_csv else None
            return train_ds, test_ds
        means = cfg.synth_means
        if not means:
            raise DataError("synth dataset needs synth_means")
        k, d = len(means), len(means[0])
        std = cfg.synth_std if len(cfg.synth_std) > 1 else cfg.synth_std[0]
        train_ds = synth_mixture(k, cfg.synth_train_per_class, d, means, std,
                                 substream(cfg.synth_seed, "synth/train"))
        test_ds = None
        if cfg.synth_test_per_class > 0:
            test_ds = synth_mixture(k, cfg.synth_test_per_class, d, means, std,
                                    substream(cfg.synth_seed, "synth/test"))
        return train_ds, test_ds
    except (OSError, IdxError, ValueError) as e:
        raise DataError(str(e)) from None


def _template(cfg: RunConfig) -> training.LadderParams:
    tc = cfg.train_config()
    return init_params(tc.layers(), tc.g_kind, 0, tc.gamma_model)


def _mean_std(values: list[float]) -> str:
    a = np.array([v for v in values if v is not None], dtype=np.float64) * 100
    if a.size == 0:
        return "n/a"
    return f"{a.mean():.2f} +- {a.std():.2f} %"


def cmd_train(config_path: str, out_dir: str | None = None, quiet: bool = False,
              data_dir: str | None = None) -> int:
    path, shipped = resolve_config_path(config_path)
    base = Path.cwd() if shipped else path.parent
    try:
        cfg = load_config(path)
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        train_ds, test_ds = load_datasets(cfg, Path(data_dir) if data_dir else base)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA

    out = Path(out_dir if out_dir is not None else _path(base, cfg.out_dir))
    out.mkdir(parents=True, exist_ok=True)
    config_text = format_config(cfg)
    val_errs, test_errs = [], []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        tc = cfg.train_config(seed)
        try:
            split = make_split(train_ds, cfg.val_size, cfg.n_labels, substream(seed, "data/split"),
                               cfg.n_unlabeled)
        except ValueError as e:
            print(f"data error: {e}", file=sys.stderr)
            return EXIT_DATA
        ckpt = out / f"run{r:02d}.ckpt.json"
        metrics_path = out / f"run{r:02d}.metrics.jsonl"
        with open(metrics_path, "w") as mf:

            def on_epoch(record, state: TrainState, mf=mf, ckpt=ckpt):
                mf.write(json.dumps(record.as_dict()) + "\n")
                mf.flush()
                if state.epoch % cfg.checkpoint_every == 0 or state.epoch == tc.total_epochs:
                    save_checkpoint(ckpt, state, config_text)

            try:
                state = train(tc, train_ds, split, on_epoch=on_epoch)
            except NonFiniteError as e:
                print(f"numeric failure in repeat {r}: {e}; last good checkpoint kept at {ckpt}",
                      file=sys.stderr)
                return EXIT_NUMERIC
            except ValueError as e:
                print(f"error: {e}", file=sys.stderr)
                return EXIT_USAGE
        if tc.total_epochs == 0:
            save_checkpoint(ckpt, state, config_text)
        val_x = train_ds.inputs[split.validation_idx]
        val_err = None
        if val_x.shape[0]:
            val_err = error_rate(state.params, val_x, train_ds.labels[split.validation_idx],
                                 state.eval_stats, cfg.eval_stats_mode)
        test_err = None
        if test_ds is not None and all(s.populated for s in state.eval_stats):
            test_err = error_rate(state.params, test_ds.inputs, test_ds.labels,
                                  state.eval_stats, cfg.eval_stats_mode)
        val_errs.append(val_err)
        test_errs.append(test_err)
        if not quiet:
            fmt = lambda e: "n/a" if e is None else f"{100 * e:.2f} %"  # noqa: E731
            print(f"repeat {r} (seed {seed}): validation error {fmt(val_err)}, test error {fmt(test_err)}")
    print(f"validation error: {_mean_std(val_errs)}")
    print(f"test error: {_mean_std(test_errs)}")
    return EXIT_OK


def load_trained(checkpoint: str) -> tuple[RunConfig, TrainState]:
    doc = read_checkpoint(checkpoint)
    try:
        cfg = parse_config(doc["config"], f"{checkpoint}:config")
    except (ConfigError, KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint config is invalid: {e}") from None
    return cfg, restore_state(doc, _template(cfg))


def confusion_counts(labels: np.ndarray, predicted: np.ndarray, k: int) -> np.ndarray:
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, predicted), 1)
    return counts


def cmd_eval(checkpoint: str, images: str | None = None, labels: str | None = None,
             csv: str | None = None, confusion_out: str | None = None,
             from_config: bool = False, data_dir: str | None = None) -> int:
    try:
        cfg, state = load_trained(checkpoint)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if from_config:
            ds = load_datasets(cfg, Path(data_dir) if data_dir else Path.cwd())[1]
            if ds is None:
                print("error: the checkpoint's config names no test set", file=sys.stderr)
                return EXIT_USAGE
        elif csv:
            ds = load_csv_dataset(csv)
        elif images and labels:
            ds = load_idx_dataset(images, labels, state.params.encoder.widths[-1])
        else:
            print("error: give --csv, --from-config or both --images and --labels", file=sys.stderr)
            return EXIT_USAGE
    except (OSError, IdxError, ValueError, DataError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    k = state.params.encoder.widths[-1]
    if ds.inputs.shape[1] != state.params.encoder.widths[0] or ds.labels.max() >= k:
        print("data error: dataset does not match the checkpoint's architecture", file=sys.stderr)
        return EXIT_DATA
    if cfg.eval_stats_mode == "running" and not all(s.populated for s in state.eval_stats):
        print("error: checkpoint has no evaluation statistics (was it trained?)", file=sys.stderr)
        return EXIT_USAGE
    if cfg.eval_stats_mode == "batch":
        _, pred = predict_batch_stats(state.params.encoder, ds.inputs)
    else:
        _, pred = predict(state.params.encoder, ds.inputs, state.eval_stats)
    counts = confusion_counts(ds.labels, pred, k)
    wrong = int(np.sum(pred != ds.labels))
    target = Path(confusion_out) if confusion_out else Path(str(checkpoint) + ".confusion.csv")
    lines = ["true," + ",".join(f"pred_{j}" for j in range(k))]
    lines += [f"{i}," + ",".join(str(c) for c in row) for i, row in enumerate(counts)]
    target.write_text("\n".join(lines) + "\n")
    print(f"error: {100.0 * wrong / len(ds):.2f} % ({wrong}/{len(ds)})")
    print(f"confusion counts written to {target}")
    return EXIT_OK


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def gradcheck_report(arch, seed: int, batch: int = 6, lambdas=None, noise: float = 0.3,
                     kind: GKind = GKind.PROPOSED, labeled: int | None = None,
                     u_top_mode: str = "batchnorm", h: float = 1e-4):
    """Per-group (max relative error, max |analytic grad|) on a perturbed random ladder.

    Parameters start from the usual init plus N(0, 0.3^2) perturbations so that
    no denoiser term sits at a degenerate identity value.
    """
    arch = tuple(arch)
    L = len(arch) - 1
    lambdas = tuple(lambdas) if lambdas is not None else (1.0,) * (L + 1)
    layers = make_layers(arch, (noise,) * (L + 1), lambdas)
    rng = make_rng(seed)
    params = init_params(layers, kind, seed)
    params = params.map(lambda a: a + 0.3 * rng.standard_normal(a.shape))
    x = rng.standard_normal((batch, arch[0]))
    targets = rng.integers(0, arch[-1], batch)
    mask = np.zeros(batch, dtype=bool)
    mask[: (batch // 2 if labeled is None else labeled)] = True
    noise_mats = draw_noise(params.encoder, batch, rng)
    _, traces = forward_cost(params, x, targets, mask, frozen_noise=noise_mats, u_top_mode=u_top_mode)
    analytic = flatten(backward(params, traces, targets, mask))

    def f(theta):
        return forward_cost(unflatten(params, theta), x, targets, mask,
                            frozen_noise=noise_mats, u_top_mode=u_top_mode)[0].total

    numeric = finite_diff_gradient(f, flatten(params), h)
    rel = relative_error(analytic, numeric)
    report = []
    for name, offset, shape in param_index(params):
        n = int(np.prod(shape))
        report.append((name, float(rel[offset:offset + n].max()),
                       float(np.abs(analytic[offset:offset + n]).max())))
    return report


def cmd_gradcheck(arch, seed: int, batch: int = 6, lambdas=None, noise: float = 0.3,
                  kind: GKind = GKind.PROPOSED, gamma: bool = False, u_top_mode: str = "batchnorm") -> int:
    L = len(arch) - 1
    if lambdas is None:
        lambdas = (1.0,) * (L + 1)
    if gamma:
        lambdas = (0.0,) * L + (lambdas[-1],)
    if len(lambdas) != L + 1:
        print(f"error: need {L + 1} lambdas", file=sys.stderr)
        return EXIT_USAGE
    count = flatten(init_params(make_layers(arch, (noise,) * (L + 1), lambdas), kind, 0)).size
    if count > GRADCHECK_MAX_PARAMS:
        print(f"error: {count} parameters exceed the gradient-check limit of {GRADCHECK_MAX_PARAMS}",
              file=sys.stderr)
        return EXIT_USAGE
    report = gradcheck_report(arch, seed, batch, lambdas, noise, kind, u_top_mode=u_top_mode)
    worst = 0.0
    print(f"gradcheck arch={'-'.join(map(str, arch))} seed={seed} batch={batch} params={count}")
    for name, err, gmax in report:
        worst = max(worst, err)
        flag = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"  {name:8s} max_rel_err={err:.3e} max_abs_grad={gmax:.3e} {flag}")
    if gamma:
        vmax = max((g for n, _, g in report if n.startswith("V")), default=0.0)
        print(f"  V gradient group max |grad| = {vmax!r}")
    print(f"max relative error {worst:.3e} ({'pass' if worst < GRADCHECK_TOL else 'fail'})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def cmd_denoise_demo(prior_spec: str, sigma_n: float, grid: str, out_path: str,
                     steps: int = 2000, seed: int = 0, u: float = 0.0) -> int:
    try:
        prior = parse_prior(prior_spec)
        lo, hi, n = grid.split(":")
        zs = grid_values(float(lo), float(hi), int(n))
        if sigma_n <= 0:
            raise ValueError("sigma_n must be positive")
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    fit = fit_g_to_oracle(GKind.PROPOSED, prior, sigma_n, u, steps, make_rng(seed))
    oracle = posterior_mean(zs, prior, sigma_n)
    fitted = g_apply(GKind.PROPOSED, zs, np.full_like(zs, u), fit.params)
    rows = ["z_tilde,z_hat_oracle,z_hat_fitted_g"]
    rows += [f"{a!r},{b!r},{c!r}" for a, b, c in zip(zs.tolist(), oracle.tolist(), fitted.tolist())]
    try:
        Path(out_path).write_text("\n".join(rows) + "\n")
    except OSError as e:
        print(f"error: cannot write {out_path}: {e}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {len(zs)} rows to {out_path} "
          f"(fitted g MSE {fit.achieved_mse:.4f}, optimal MSE {fit.oracle_mse:.4f})")
    return EXIT_OK


def _arch_arg(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(v) for v in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad architecture {text!r}") from None
    if len(widths) < 2:
        raise argparse.ArgumentTypeError("architecture needs at least two widths")
    return widths


def _floats_arg(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ladder", description="Ladder network experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key=value config")
    p.add_argument("config", help="config file path or name of a shipped config")
    p.add_argument("--out-dir", help="override out_dir from the config")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--data-dir", help="resolve relative dataset paths against this directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--csv")
    p.add_argument("--confusion", help="where to write confusion counts")
    p.add_argument("--from-config", action="store_true",
                   help="use the test set named in the checkpoint's own config")
    p.add_argument("--data-dir", help="base directory for --from-config dataset paths")

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    p.add_argument("--arch", type=_arch_arg, default=(5, 7, 4))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--lambdas", type=_floats_arg)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--g-kind", type=GKind, default=GKind.PROPOSED)
    p.add_argument("--gamma", action="store_true", help="zero all lambdas below the top layer")
    p.add_argument("--u-top", default="batchnorm", choices=["batchnorm", "raw"])

    p = sub.add_parser("denoise-demo", help="optimal vs fitted denoiser curve as CSV")
    p.add_argument("--prior", default="mixture:0.5,-1,0.2;0.5,1,0.2")
    p.add_argument("--sigma-n", type=float, default=0.5)
    p.add_argument("--grid", default="-3:3:201", help="lo:hi:points")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--u", type=float, default=0.0, help="constant top-down signal for the fit")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if args.command == "train":
        return cmd_train(args.config, args.out_dir, args.quiet, args.data_dir)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.images, args.labels, args.csv, args.confusion,
                        args.from_config, args.data_dir)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.arch, args.seed, args.batch, args.lambdas, args.noise,
                             args.g_kind, args.gamma, args.u_top)
    return cmd_denoise_demo(args.prior, args.sigma_n, args.grid, args.out, args.steps, args.seed, args.u)


if __name__ == "__main__":
    sys.exit(main())
