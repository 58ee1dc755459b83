"""One-step projected gradient ascent on the inputs.

The attack reads a parameter snapshot and never writes to it, so it can
run on one thread while another thread updates the live parameters.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import Branch, LabeledBatch, ModelParams, Phase, input_gradient

log = logging.getLogger(__name__)


class StepMode(str, enum.Enum):
    RAW = "raw"
    SIGN = "sign"


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.0
    alpha: float = 0.0
    random_init: bool = True
    step_mode: StepMode = StepMode.RAW
    clamp_domain: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self) -> None:
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        object.__setattr__(self, "step_mode", StepMode(self.step_mode))
        if self.clamp_domain is not None:
            lo, hi = self.clamp_domain
            if lo > hi:
                raise ValueError(f"empty clamp domain [{lo}, {hi}]")
            object.__setattr__(self, "clamp_domain", (float(lo), float(hi)))


def project_linf(x: np.ndarray, center: np.ndarray, epsilon: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if x.shape != center.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs center {center.shape}")
    return np.clip(x, center - epsilon, center + epsilon)


InputGrad = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_input_grad(params: ModelParams) -> InputGrad:
    """Per-example input gradient through the aux branch with running statistics."""

    def grad(x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return input_gradient(params, LabeledBatch(x, labels), Branch.AUX, Phase.EVAL)

    return grad


def perturb(x: np.ndarray, labels: np.ndarray, cfg: AttackConfig, grad_fn: InputGrad, rng_seed) -> np.ndarray:
    """Random start, one ascent step from it, projection onto the ball and domain."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0.0:
        return x.copy()
    start = x
    if cfg.random_init:
        rng = np.random.default_rng(rng_seed)
        start = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
        if cfg.clamp_domain is not None:
            start = np.clip(start, *cfg.clamp_domain)
    if cfg.alpha == 0.0:
        adv = start
    else:
        g = grad_fn(np.ascontiguousarray(start), labels)
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(f"attack gradient has {bad} non-finite entries; step aborted")
        step = g if cfg.step_mode is StepMode.RAW else np.sign(g)
        adv = start + cfg.alpha * step
    adv = project_linf(adv, x, cfg.epsilon)
    if cfg.clamp_domain is not None:
        adv = np.clip(adv, *cfg.clamp_domain)
    return adv


def generate_adversarial(
    params_snapshot: ModelParams,
    batch: LabeledBatch,
    cfg: AttackConfig,
    rng_seed,
    grad_fn: InputGrad | None = None,
) -> LabeledBatch:
    """Adversarial copy of ``batch``; labels and row ids are kept."""
    if cfg.clamp_domain is not None:
        lo, hi = cfg.clamp_domain
        if batch.inputs.size and (batch.inputs.min() < lo or batch.inputs.max() > hi):
            raise ValueError(f"batch inputs fall outside the clamp domain [{lo}, {hi}]")
    grad_fn = grad_fn or model_input_grad(params_snapshot)
    adv = perturb(batch.inputs, batch.labels, cfg, grad_fn, rng_seed)
    return LabeledBatch(adv, batch.labels.copy(), None if batch.indices is None else batch.indices.copy())
