"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment.  Every key of ``RunConfig`` is
accepted, unknown keys are rejected, and ``arch`` / ``lambdas`` / ``dataset``
are required.  ``format_config`` writes the canonical text, which parses back
to an equal object.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .decoder import GKind
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _means(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(part) for part in text.split(";") if part.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _arch(text: str) -> tuple[int, ...]:
    widths = tuple(int(v) for v in text.split("-"))
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"bad architecture {text!r}")
    return widths


def _labels(text: str) -> int | None:
    return None if text.strip().lower() == "all" else int(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, GKind):
        return value.value
    if value is None:
        return "all"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ";".join(",".join(repr(v) for v in row) for row in value)
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    dataset: str
    arch: tuple[int, ...]
    lambdas: tuple[float, ...]
    g_kind: GKind = GKind.PROPOSED
    noise_std: float = 0.3
    noise_stds: tuple[float, ...] = ()
    learning_rate: float = 0.002
    main_epochs: int = 100
    anneal_epochs: int = 50
    batch_labeled: int = 100
    batch_unlabeled: int = 100
    steps_per_epoch: int = 0
    include_labeled_in_pool: bool = True
    seed: int = 0
    repeats: int = 1
    eval_stats_decay: float = 0.99
    eval_stats_mode: str = "running"
    u_top_mode: str = "batchnorm"
    gamma_model: bool = False
    n_labels: int | None = 100
    n_unlabeled: int | None = None
    val_size: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""
    synth_means: tuple[tuple[float, ...], ...] = ()
    synth_std: tuple[float, ...] = (1.0,)
    synth_train_per_class: int = 500
    synth_test_per_class: int = 500
    synth_seed: int = 0
    out_dir: str = "runs"
    checkpoint_every: int = 1

    def layer_noise(self) -> tuple[float, ...]:
        if self.noise_stds:
            return self.noise_stds
        return (self.noise_std,) * len(self.arch)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            widths=self.arch,
            lambdas=self.lambdas,
            noise_stds=self.layer_noise(),
            g_kind=self.g_kind,
            learning_rate=self.learning_rate,
            main_epochs=self.main_epochs,
            anneal_epochs=self.anneal_epochs,
            batch_labeled=self.batch_labeled,
            batch_unlabeled=self.batch_unlabeled,
            seed=self.seed if seed is None else seed,
            eval_stats_decay=self.eval_stats_decay,
            eval_stats_mode=self.eval_stats_mode,
            u_top_mode=self.u_top_mode,
            gamma_model=self.gamma_model,
            steps_per_epoch=self.steps_per_epoch,
            include_labeled_in_pool=self.include_labeled_in_pool,
        )


_PARSERS = {
    "dataset": str,
    "arch": _arch,
    "lambdas": _floats,
    "g_kind": GKind,
    "noise_std": float,
    "noise_stds": _floats,
    "learning_rate": float,
    "main_epochs": int,
    "anneal_epochs": int,
    "batch_labeled": int,
    "batch_unlabeled": int,
    "steps_per_epoch": int,
    "include_labeled_in_pool": _bool,
    "seed": int,
    "repeats": int,
    "eval_stats_decay": float,
    "eval_stats_mode": str,
    "u_top_mode": str,
    "gamma_model": _bool,
    "n_labels": _labels,
    "n_unlabeled": _labels,
    "val_size": int,
    "synth_means": _means,
    "synth_std": _floats,
    "synth_train_per_class": int,
    "synth_test_per_class": int,
    "synth_seed": int,
    "checkpoint_every": int,
}
REQUIRED = ("dataset", "arch", "lambdas")
DATASETS = ("mnist", "csv", "synth")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values: dict = {}
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: key {key!r} given twice")
        try:
            values[key] = _PARSERS.get(key, str)(value)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key!r}: {e}") from None
        lines[key] = where
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"{source}: missing required key {key!r}")
    if values["dataset"] not in DATASETS:
        raise ConfigError(f"{lines['dataset']}: dataset must be one of {DATASETS}")
    cfg = RunConfig(**values)
    L = len(cfg.arch) - 1
    if len(cfg.lambdas) != L + 1:
        raise ConfigError(f"{lines['lambdas']}: lambdas has {len(cfg.lambdas)} entries, "
                          f"architecture needs {L + 1}")
    if cfg.noise_stds and len(cfg.noise_stds) != L + 1:
        raise ConfigError(f"{lines['noise_stds']}: noise_stds has {len(cfg.noise_stds)} entries, "
                          f"architecture needs {L + 1}")
    if cfg.repeats < 1:
        raise ConfigError(f"{lines['repeats']}: repeats must be at least 1")
    try:
        cfg.train_config()
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        text = "-".join(map(str, value)) if f.name == "arch" else _fmt(value)
        lines.append(f"{f.name} = {text}\n")
    return "".join(lines)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
