"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Every key is a field of
:class:`TrainConfig`; unknown keys are errors. ``serialize`` writes every
field in declaration order, so parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

from .adversary import AttackConfig, StepMode
from .optim import SCHEDULES

PROTOCOLS = ("vanilla", "disadv", "conadv")
OPTIMIZERS = ("lars", "sgd")
AUGMENTATIONS = ("none", "flip-crop")
EXECUTIONS = ("sequential", "overlap")
BN_TRAIN_STATS = ("batch", "frozen")


class ConfigError(ValueError):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {msg}" for k, msg in errors))


@dataclass
class TrainConfig:
    protocol: str = "conadv"
    tau: int = 1
    workers: int = 1
    global_batch: int = 512
    epochs: int = 20
    steps: int = 0  # 0: derived from epochs
    model: str = "cnn"
    widths: str = ""  # comma list; empty keeps the preset
    optimizer: str = "lars"
    schedule: str = "warmup-poly"
    base_lr: float = 0.5
    lr_reference_batch: int = 256  # 0 disables linear scaling
    warmup_epochs: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    trust_coef: float = 0.001
    lars_eps: float = 1e-9
    epsilon: float = 2.0 / 255.0
    alpha: float = 2.0 / 255.0
    random_init: bool = True
    step_mode: str = "raw"
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    augmentation: str = "none"
    data_seed: int = 0
    init_seed: int = 0
    attack_seed: int = 0
    dataset: str = "shapes:n=8192,size=12,seed=0"
    execution: str = "sequential"
    update_threads: int = 1
    worker_threads: int = 1
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    bn_train_stats: str = "batch"
    eval_every: int = 1  # epochs
    output_dir: str = "runs"
    metrics_file: str = ""  # empty: <output_dir>/<run name>.jsonl

    # ------------------------------------------------------------------
    def attack(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon,
            alpha=self.alpha,
            random_init=self.random_init,
            step_mode=StepMode(self.step_mode),
            clamp_domain=(self.clamp_lo, self.clamp_hi),
        )

    def width_tuple(self) -> tuple[int, ...] | None:
        return tuple(int(w) for w in self.widths.split(",") if w.strip()) or None

    def local_batch(self) -> int:
        return self.global_batch // self.workers

    def total_steps(self, n_train: int) -> int:
        if self.steps > 0:
            return self.steps
        return math.ceil(self.epochs * n_train / self.global_batch)

    def warmup_steps(self, n_train: int) -> int:
        return math.ceil(self.warmup_epochs * n_train / self.global_batch)

    def peak_lr(self) -> float:
        if self.lr_reference_batch <= 0:
            return self.base_lr
        return self.base_lr * self.global_batch / self.lr_reference_batch

    def run_name(self) -> str:
        tag = f"{self.protocol}"
        if self.protocol == "conadv":
            tag += f"-tau{self.tau}"
        return f"{tag}-b{self.global_batch}-k{self.workers}-s{self.init_seed}"

    def metrics_path(self) -> Path:
        if self.metrics_file:
            return Path(self.metrics_file)
        return Path(self.output_dir) / f"{self.run_name()}.jsonl"

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> TrainConfig:
        errors: list[tuple[str, str]] = []

        def need(ok: bool, key: str, msg: str) -> None:
            if not ok:
                errors.append((key, msg))

        need(self.protocol in PROTOCOLS, "protocol", f"must be one of {PROTOCOLS}")
        need(self.workers >= 1, "workers", "must be >= 1")
        need(self.global_batch >= 1, "global_batch", "must be >= 1")
        if self.workers >= 1:
            need(self.global_batch % self.workers == 0, "global_batch", f"must be divisible by workers={self.workers}")
            need(self.global_batch // self.workers >= 2 or self.bn_train_stats == "frozen", "global_batch",
                 "local batch must hold >= 2 examples for batch statistics")
        need(self.tau >= 0, "tau", "must be >= 0")
        need(not (self.protocol == "conadv" and self.execution == "overlap" and self.tau < 1), "tau",
             "overlap execution needs tau >= 1")
        need(self.epochs >= 0 and self.steps >= 0, "epochs", "epochs and steps must be >= 0")
        need(self.epochs > 0 or self.steps > 0, "epochs", "set epochs or steps")
        need(self.model.split("-")[0] in ("mlp", "cnn"), "model", "must be mlp or cnn")
        try:
            self.width_tuple()
        except ValueError:
            errors.append(("widths", "must be a comma-separated list of integers"))
        need(self.optimizer in OPTIMIZERS, "optimizer", f"must be one of {OPTIMIZERS}")
        need(self.schedule in SCHEDULES, "schedule", f"must be one of {SCHEDULES}")
        need(self.base_lr >= 0, "base_lr", "must be >= 0")
        need(self.warmup_epochs >= 0, "warmup_epochs", "must be >= 0")
        need(0 <= self.momentum < 1, "momentum", "must be in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.epsilon >= 0, "epsilon", "must be >= 0")
        need(self.alpha >= 0, "alpha", "must be >= 0")
        need(self.step_mode in tuple(m.value for m in StepMode), "step_mode", "must be raw or sign")
        need(self.clamp_lo <= self.clamp_hi, "clamp_lo", "must not exceed clamp_hi")
        need(self.augmentation in AUGMENTATIONS, "augmentation", f"must be one of {AUGMENTATIONS}")
        need(self.execution in EXECUTIONS, "execution", f"must be one of {EXECUTIONS}")
        need(self.update_threads in (1, 2), "update_threads", "must be 1 or 2")
        need(self.worker_threads >= 1, "worker_threads", "must be >= 1")
        need(0 < self.bn_momentum < 1, "bn_momentum", "must be in (0, 1)")
        need(self.bn_eps > 0, "bn_eps", "must be > 0")
        need(self.bn_train_stats in BN_TRAIN_STATS, "bn_train_stats", f"must be one of {BN_TRAIN_STATS}")
        need(self.eval_every >= 0, "eval_every", "must be >= 0")
        for key in ("data_seed", "init_seed", "attack_seed"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        if errors:
            raise ConfigError(errors)
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    default = _FIELDS[key].default
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values: dict = {}
    errors: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            errors.append((f"line {lineno}", "expected key = value"))
            continue
        if key not in _FIELDS:
            errors.append((key, "unknown key"))
            continue
        try:
            values[key] = _coerce(key, raw.strip())
        except ValueError as exc:
            errors.append((key, str(exc)))
    if errors:
        raise ConfigError(errors)
    return dataclasses.replace(base or TrainConfig(), **values)


def serialize_config(cfg: TrainConfig) -> str:
    return "".join(f"{name} = {_format(getattr(cfg, name))}\n" for name in _FIELDS)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Overrides given as strings (e.g. from the command line) or typed values."""
    changes = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError([(key, "unknown key")])
        changes[key] = _coerce(key, value) if isinstance(value, str) else value
    return dataclasses.replace(cfg, **changes)
