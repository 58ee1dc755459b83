"""Step-time model and wall-clock benchmark for the three protocols.

The model charges each step with per-phase costs measured for one worker
holding ``capacity`` examples. A global batch ``B`` is spread over
``K = ceil(B / capacity)`` workers, each on its own processor, so step time
does not grow with ``B`` until the processor budget runs out. ConAdv needs a
second processor per worker to hide the attack behind the update.
"""

from __future__ import annotations

import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .config import TrainConfig
from .data import Dataset
from .distributed import (
    StepContext,
    build_state,
    conadv_step,
    disadv_step,
    prime_buffers,
    vanilla_step,
)
from .model import Branch, LabeledBatch, ModelParams, Phase, half_loss_and_grads, input_gradient, model_forward

log = logging.getLogger(__name__)

PROTOCOLS = ("vanilla", "disadv", "conadv")


@dataclass(frozen=True)
class ThroughputModel:
    t_fwd: float  # ms, one worker at full capacity
    t_bwd: float
    t_attack: float
    processors: int | None = None  # None: every batch size gets 2K processors
    capacity: int = 64

    def __post_init__(self) -> None:
        for name in ("t_fwd", "t_bwd", "t_attack"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.processors is not None and self.processors < 1:
            raise ValueError("processors must be >= 1")

    def workers(self, batch: int) -> int:
        return math.ceil(batch / self.capacity)

    def step_time(self, batch: int, protocol: str) -> float:
        """Milliseconds per step; raises when the budget cannot host one worker per shard."""
        if protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol!r}")
        k = self.workers(batch)
        p = 2 * k if self.processors is None else self.processors
        if p < k:
            raise ValueError(f"batch {batch} needs {k} workers but only {p} processors are available")
        scale = (batch / k) / self.capacity  # partially filled workers run proportionally faster
        update = (self.t_fwd + self.t_bwd) * scale
        attack = self.t_attack * scale
        if protocol == "vanilla":
            return update
        if protocol == "conadv" and p >= 2 * k:
            return max(attack, update)
        return attack + update


def simulate_throughput(model: ThroughputModel, batch_sizes, protocol: str) -> dict[int, float]:
    """Images per millisecond for every batch size."""
    return {int(b): b / model.step_time(int(b), protocol) for b in batch_sizes}


def throughput_table(model: ThroughputModel, batch_sizes) -> list[dict]:
    rows = []
    for b in batch_sizes:
        row = {"batch": int(b), "workers": model.workers(int(b))}
        for proto in PROTOCOLS:
            row[proto] = int(b) / model.step_time(int(b), proto)
        row["conadv_vs_disadv"] = row["conadv"] / row["disadv"]
        row["conadv_vs_vanilla"] = row["conadv"] / row["vanilla"]
        rows.append(row)
    return rows


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def calibrate_costs(params: ModelParams, batch: LabeledBatch, repeats: int = 5) -> ThroughputModel:
    """Measure T_fwd, T_bwd and T_attack on one worker's batch.

    T_bwd is the forward+backward time of both halves minus T_fwd; T_attack
    is one input-gradient pass, the cost of a 1-step attack.
    """
    def fwd():
        model_forward(params, batch, Branch.MAIN, Phase.EVAL)
        model_forward(params, batch, Branch.AUX, Phase.EVAL)

    def update():
        half_loss_and_grads(params.copy(), batch, Branch.MAIN, Phase.EVAL)
        half_loss_and_grads(params.copy(), batch, Branch.AUX, Phase.EVAL)

    fwd()
    update()
    t_fwd = _median_ms(fwd, repeats)
    t_upd = _median_ms(update, repeats)
    t_att = _median_ms(lambda: input_gradient(params, batch), repeats)
    return ThroughputModel(t_fwd=t_fwd, t_bwd=max(t_upd - t_fwd, 1e-6), t_attack=t_att, capacity=len(batch))


# ---------------------------------------------------------------- wall clock


def hardware_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not available on every platform
        return os.cpu_count() or 1


@dataclass
class BenchResult:
    median_ms: dict[str, float]
    phase_ms: dict[str, dict[str, float]]
    ratios: dict[str, float]
    trajectories_equal: bool
    hardware_threads: int
    flagged: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "median_ms": self.median_ms,
            "phase_ms": self.phase_ms,
            "ratios": self.ratios,
            "trajectories_equal": self.trajectories_equal,
            "hardware_threads": self.hardware_threads,
            "flagged": self.flagged,
            "notes": self.notes,
        }


def _time_run(cfg: TrainConfig, dataset: Dataset, warmup: int, timed: int):
    agg, workers, sched = build_state(cfg, dataset)
    total = warmup + timed
    ctx = StepContext(
        batch_fn=sched,
        attack=cfg.attack(),
        attack_seed=cfg.attack_seed,
        execution=cfg.execution,
        update_threads=cfg.update_threads,
        worker_threads=cfg.worker_threads,
        total_steps=total,
    )
    metrics = []
    try:
        if cfg.protocol == "conadv" and cfg.tau > 0:
            prime_buffers(agg, workers, cfg.tau, ctx)
        for _ in range(total):
            if cfg.protocol == "vanilla":
                metrics.append(vanilla_step(agg, workers, ctx))
            elif cfg.protocol == "disadv":
                metrics.append(disadv_step(agg, workers, ctx))
            else:
                metrics.append(conadv_step(agg, workers, cfg.tau, ctx))
    finally:
        ctx.close()
    kept = metrics[warmup:]
    phases = {
        "t_step_ms": statistics.median(m.t_step_ms for m in kept),
        "t_update_ms": statistics.median(m.t_update_ms for m in kept),
        "t_gen_ms": statistics.median(m.t_gen_ms for m in kept),
    }
    return agg.params, phases


def _params_equal(a: ModelParams, b: ModelParams) -> bool:
    if any(not np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors):
        return False
    for name, s in a.bn.items():
        o = b.bn[name]
        if not all(np.array_equal(getattr(s, f), getattr(o, f)) for f in ("main_mean", "main_var", "aux_mean", "aux_var")):
            return False
    return True


def bench_wallclock(cfg: TrainConfig, dataset: Dataset, warmup: int = 2, timed: int = 8,
                    update_threads: int = 2) -> BenchResult:
    """Median step times of vanilla, DisAdv and ConAdv (sequential and overlapped).

    All runs share ``cfg`` except for protocol and execution mode. BLAS is
    pinned to one thread per caller so that the only parallelism is the
    protocol's own. The overlapped ConAdv trajectory must equal the
    sequential one bitwise, otherwise its timings are not reported as valid.
    """
    threads = hardware_threads()
    notes: list[str] = []
    flagged = False
    if threads < 2:
        flagged = True
        msg = f"only {threads} hardware thread available: overlap cannot hide the attack, timings are not meaningful"
        log.warning(msg)
        notes.append(msg)
    tau = max(cfg.tau, 1)
    base = cfg.replace(update_threads=update_threads, tau=tau, steps=warmup + timed, eval_every=0)
    runs = {
        "vanilla": base.replace(protocol="vanilla", execution="sequential"),
        "disadv": base.replace(protocol="disadv", execution="sequential"),
        "conadv_sequential": base.replace(protocol="conadv", execution="sequential"),
        "conadv_overlap": base.replace(protocol="conadv", execution="overlap"),
    }
    medians, phases, finals = {}, {}, {}
    with threadpool_limits(limits=1):
        for name, run_cfg in runs.items():
            run_cfg.validate()
            finals[name], phases[name] = _time_run(run_cfg, dataset, warmup, timed)
            medians[name] = phases[name]["t_step_ms"]
    equal = _params_equal(finals["conadv_overlap"], finals["conadv_sequential"])
    if not equal:
        flagged = True
        notes.append("overlap trajectory differs from sequential replay; timings discarded")
    ratios = {
        "conadv_overlap_vs_disadv": medians["conadv_overlap"] / medians["disadv"],
        "conadv_sequential_vs_disadv": medians["conadv_sequential"] / medians["disadv"],
        "conadv_overlap_vs_vanilla": medians["conadv_overlap"] / medians["vanilla"],
        "attack_vs_update": phases["disadv"]["t_gen_ms"] / phases["disadv"]["t_update_ms"],
    }
    return BenchResult(medians, phases, ratios, equal, threads, flagged, notes)
