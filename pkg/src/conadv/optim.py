"""SGD with momentum, LARS, and learning-rate schedules.

Both optimizers take descent steps and update ``params`` in place. Tensors
whose role is ``bias``, ``bn_scale`` or ``bn_shift`` are exempt from LARS
layer-wise scaling and from weight decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

EXEMPT_ROLES = frozenset({"bias", "bn_scale", "bn_shift"})


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class OptimState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coef: float = 0.001
    eps: float = 1e-9
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def buffer(self, name: str, like: np.ndarray) -> np.ndarray:
        buf = self.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(like)
            self.buffers[name] = buf
        elif buf.shape != like.shape:
            raise ValueError(f"momentum buffer {name!r} has shape {buf.shape}, parameter {like.shape}")
        return buf

    def copy(self) -> OptimState:
        return OptimState(
            self.lr, self.momentum, self.weight_decay, self.trust_coef, self.eps, self.step,
            {k: v.copy() for k, v in self.buffers.items()},
        )


def _check_grads(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")


def sgd_momentum_step(
    params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState, lr: float | None = None
) -> dict[str, np.ndarray]:
    """v <- m*v + g (+ wd*w for weights); w <- w - lr*v."""
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    _check_grads(params, grads)
    for name in sorted(grads):
        w = params[name]
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * w
        v = state.buffer(name, w)
        v *= state.momentum
        v += g
        w -= lr * v
    state.step += 1
    return params


def trust_ratio(w_norm: float, g_norm: float, weight_decay: float, eps: float) -> float:
    return w_norm / (g_norm + weight_decay * w_norm + eps)


def lars_local_lr(w: np.ndarray, g: np.ndarray, lr: float, state: OptimState, exempt: bool = False) -> float:
    """Layer-wise rate; exempt tensors and zero-norm weights fall back to ``lr``."""
    if exempt:
        return lr
    w_norm = float(np.linalg.norm(w))
    if w_norm == 0.0:
        return lr
    trust = trust_ratio(w_norm, float(np.linalg.norm(g)), state.weight_decay, state.eps)
    if not math.isfinite(trust):
        raise NonFiniteError(f"non-finite trust ratio (||w||={w_norm})")
    return lr * state.trust_coef * trust


def lars_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    roles: Mapping[str, str] | None = None,
    lr: float | None = None,
) -> dict[str, np.ndarray]:
    """v <- m*v + local_lr*(g + wd*w); w <- w - v, one trust ratio per tensor."""
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    _check_grads(params, grads)
    roles = roles or {}
    for name in sorted(grads):
        w = params[name]
        g = grads[name]
        exempt = roles.get(name, "weight") in EXEMPT_ROLES
        local_lr = lars_local_lr(w, g, lr, state, exempt)
        if not exempt and state.weight_decay:
            g = g + state.weight_decay * w
        v = state.buffer(name, w)
        v *= state.momentum
        v += local_lr * g
        w -= v
    state.step += 1
    return params


@dataclass(frozen=True)
class ScheduleConfig:
    mode: str = "warmup-poly"  # warmup-poly | constant
    peak_lr: float = 0.1
    warmup_steps: int = 0
    total_steps: int = 1
    power: float = 2.0


SCHEDULES = ("warmup-poly", "constant")


def lr_schedule(step: int, cfg: ScheduleConfig) -> float:
    if cfg.mode == "constant":
        return cfg.peak_lr
    if cfg.mode != "warmup-poly":
        raise ValueError(f"unknown schedule {cfg.mode!r}; choose from {SCHEDULES}")
    t = max(int(step), 0)
    w = max(int(cfg.warmup_steps), 0)
    total = max(int(cfg.total_steps), 1)
    if w > 0 and t < w:
        return cfg.peak_lr * t / w
    if t >= total:
        return 0.0
    if total <= w:
        return cfg.peak_lr
    frac = (t - w) / (total - w)
    return cfg.peak_lr * (1.0 - frac) ** cfg.power


def scaled_peak_lr(base_lr: float, global_batch: int, reference_batch: int = 256) -> float:
    """Linear scaling rule: peak grows in proportion to the global batch."""
    return base_lr * global_batch / reference_batch


def theory_step_size(L: float, delta: float, sigma: float, T: int) -> float:
    """min(1/L, sqrt(delta / (L sigma^2 T))), the constant outer step."""
    if sigma <= 0:
        return 1.0 / L
    return min(1.0 / L, math.sqrt(delta / (L * sigma * sigma * T)))
