"""Simulated K-worker data-parallel training with adversarial protocols.

Three protocols share one fabric:

* ``vanilla``: clean cross-entropy only.
* ``disadv``: every step first crafts adversarial examples against the
  current weights, then computes the half-clean/half-adversarial gradient.
* ``conadv``: the adversarial batch consumed at step t was crafted against
  the weights of step t - tau and waits in a per-worker :class:`StaleBuffer`.
  Crafting the batch for step t + tau only reads an immutable snapshot of the
  current weights, so it can run on another thread while this step's update
  is computed.

Weights are always synchronous: every worker starts a step from the same
parameters, gradients are averaged in ascending worker order and one
optimizer step is taken on the aggregator.
"""

from __future__ import annotations

import collections
import json
import logging
import math
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .adversary import AttackConfig, generate_adversarial
from .config import TrainConfig
from .data import Dataset, flip_crop
from .model import (
    Branch,
    DualBatchNormState,
    LabeledBatch,
    ModelParams,
    Phase,
    accuracy,
    half_loss_and_grads,
    init_params,
    make_architecture,
)
from .optim import OptimState, ScheduleConfig, lars_step, lr_schedule, sgd_momentum_step

log = logging.getLogger(__name__)

Grads = dict[str, np.ndarray]


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------- sharding


def shard_dataset(n_items: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n_items)`` cut into ``k`` equal disjoint shards.

    When ``k`` does not divide ``n_items`` the last ``n_items % k`` shuffled
    rows are dropped.
    """
    if k <= 0:
        raise ValueError(f"number of shards must be positive, got {k}")
    if k > n_items:
        raise ValueError(f"cannot split {n_items} items into {k} non-empty shards")
    perm = np.random.default_rng(seed).permutation(n_items)
    size = n_items // k
    if n_items % k:
        log.info("dropping %d rows so %d shards are equal", n_items % k, k)
    return [np.sort(perm[i * size:(i + 1) * size]) for i in range(k)]


class BatchSchedule:
    """Clean mini-batch of every (worker, step), fixed in advance.

    Each worker walks its shard in per-epoch seeded shuffles; consecutive
    steps take consecutive slices of that stream, wrapping into the next
    shuffle when a shard is exhausted. Because the batch of any future step
    is known, the ConAdv pipeline can craft it early.
    """

    def __init__(self, dataset: Dataset, shards: Sequence[np.ndarray], local_batch: int, seed: int,
                 augmentation: str = "none"):
        self.dataset = dataset
        self.shards = [np.asarray(s) for s in shards]
        self.local_batch = local_batch
        self.seed = seed
        self.augmentation = augmentation
        self._perms: dict[tuple[int, int], np.ndarray] = {}

    def _perm(self, worker: int, epoch: int) -> np.ndarray:
        key = (worker, epoch)
        if key not in self._perms:
            rng = np.random.default_rng([self.seed, worker, epoch])
            self._perms[key] = rng.permutation(self.shards[worker].size)
        return self._perms[key]

    def indices(self, worker: int, step: int) -> np.ndarray:
        shard = self.shards[worker]
        pos = np.arange(step * self.local_batch, (step + 1) * self.local_batch)
        epochs, offsets = np.divmod(pos, shard.size)
        out = np.empty(self.local_batch, dtype=np.intp)
        for e in np.unique(epochs):
            sel = epochs == e
            out[sel] = shard[self._perm(worker, int(e))[offsets[sel]]]
        return out

    def __call__(self, worker: int, step: int) -> LabeledBatch:
        idx = self.indices(worker, step)
        x = self.dataset.train_x[idx]
        if self.augmentation == "flip-crop":
            x = flip_crop(x, np.random.default_rng([self.seed, 1_000_003, worker, step]))
        return LabeledBatch(x, self.dataset.train_y[idx], idx)


# ---------------------------------------------------------------- state


@dataclass
class BufferEntry:
    gen_step: int  # index of the weight snapshot the batch was crafted against
    target_step: int  # step that consumes it
    batch: LabeledBatch


class StaleBuffer:
    """Single-producer/single-consumer FIFO of crafted adversarial batches."""

    def __init__(self, tau: int):
        if tau < 0:
            raise ValueError(f"staleness must be >= 0, got {tau}")
        self.tau = tau
        self._queue: collections.deque[BufferEntry] = collections.deque()

    def __len__(self) -> int:
        return len(self._queue)

    def push(self, entry: BufferEntry) -> None:
        if self._queue and entry.target_step != self._queue[-1].target_step + 1:
            raise ProtocolError(f"buffer expected target {self._queue[-1].target_step + 1}, got {entry.target_step}")
        self._queue.append(entry)

    def pop(self, step: int) -> BufferEntry:
        if not self._queue:
            raise ProtocolError(f"adversarial buffer empty at step {step}")
        entry = self._queue.popleft()
        if entry.target_step != step:
            raise ProtocolError(f"buffer head targets step {entry.target_step}, consumer is at {step}")
        expected = max(step - self.tau, 0)
        if entry.gen_step != expected:
            raise ProtocolError(
                f"batch for step {step} was crafted from weights of step {entry.gen_step}, expected {expected}"
            )
        return entry


@dataclass
class WorkerState:
    worker_id: int
    shard: np.ndarray
    buffer: StaleBuffer
    clean: LabeledBatch | None = None
    bn: dict[str, DualBatchNormState] | None = None


@dataclass
class AggregatorState:
    params: ModelParams
    opt: OptimState
    schedule: ScheduleConfig
    optimizer: str = "lars"
    step: int = 0


class AccessTrace:
    """Dataset rows read by the adversarial generator, per worker."""

    def __init__(self) -> None:
        self.rows: dict[int, list[np.ndarray]] = collections.defaultdict(list)

    def record(self, worker: int, indices: np.ndarray | None) -> None:
        if indices is None:
            raise ProtocolError(f"worker {worker} crafted a batch without row ids; access cannot be traced")
        self.rows[worker].append(np.asarray(indices).copy())

    def touched(self, worker: int) -> np.ndarray:
        parts = self.rows.get(worker, [])
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.intp)


@dataclass
class StepContext:
    """Everything a step needs besides the mutable states."""

    batch_fn: Callable[[int, int], LabeledBatch]
    attack: AttackConfig
    attack_seed: int = 0
    execution: str = "sequential"  # sequential | overlap
    update_threads: int = 1
    worker_threads: int = 1
    train_phase: Phase = Phase.TRAIN  # Phase.EVAL freezes BN statistics
    total_steps: int | None = None
    trace: AccessTrace | None = None
    _pools: dict[str, ThreadPoolExecutor] = field(default_factory=dict, repr=False)

    def pool(self, role: str) -> ThreadPoolExecutor:
        """Separate pools per role, so a task never waits on its own pool."""
        if role not in self._pools:
            size = {"gen": 1, "workers": self.worker_threads, "halves": self.worker_threads}[role]
            self._pools[role] = ThreadPoolExecutor(max_workers=size, thread_name_prefix=f"conadv-{role}")
        return self._pools[role]

    def close(self) -> None:
        for pool in self._pools.values():
            pool.shutdown(wait=True)
        self._pools.clear()


@dataclass
class StepMetrics:
    step: int
    loss: float
    grad_norm: float
    lr: float
    t_update_ms: float
    t_gen_ms: float
    t_step_ms: float


# ---------------------------------------------------------------- building blocks


def aggregate(worker_grads: Sequence[Grads]) -> Grads:
    """Mean over workers, summed in ascending worker order."""
    if len(worker_grads) == 0:
        raise ValueError("cannot aggregate zero gradient sets")
    names = sorted(worker_grads[0])
    for k, g in enumerate(worker_grads[1:], start=1):
        if sorted(g) != names:
            raise ValueError(f"worker {k} gradient keys differ from worker 0")
        for name in names:
            if g[name].shape != worker_grads[0][name].shape:
                raise ValueError(f"worker {k} gradient {name!r} has shape {g[name].shape}, "
                                 f"worker 0 has {worker_grads[0][name].shape}")
    out = {}
    for name in names:
        acc = worker_grads[0][name].copy()
        for g in worker_grads[1:]:
            acc += g[name]
        out[name] = acc / len(worker_grads)
    return out


def global_norm(grads: Grads) -> float:
    return math.sqrt(sum(float(np.dot(grads[k].ravel(), grads[k].ravel())) for k in sorted(grads)))


def _local_view(params: ModelParams, bn: dict[str, DualBatchNormState]) -> ModelParams:
    # shares the weight arrays (read-only during a step), owns its BN state
    return ModelParams(params.arch, params.tensors, params.roles, bn, params.layers)


def attack_seed_for(base: int, worker: int, target_step: int) -> list[int]:
    return [base, worker, target_step]


def craft(snapshot: ModelParams, worker: int, target_step: int, ctx: StepContext) -> LabeledBatch:
    """Adversarial version of worker ``worker``'s clean batch for ``target_step``."""
    clean = ctx.batch_fn(worker, target_step)
    if ctx.trace is not None:
        ctx.trace.record(worker, clean.indices)
    return generate_adversarial(snapshot, clean, ctx.attack, attack_seed_for(ctx.attack_seed, worker, target_step))


def _run_halves(params: ModelParams, clean: LabeledBatch, adv: LabeledBatch | None, ctx: StepContext):
    """Worker-local update path: returns (loss, grads, post-step BN state)."""
    phase = ctx.train_phase
    if adv is None:
        local = _local_view(params, params.bn_copy())
        loss, grads = half_loss_and_grads(local, clean, Branch.MAIN, phase)
        return loss, grads, local.bn
    if len(clean) != len(adv):
        raise ValueError(f"clean batch has {len(clean)} examples, adversarial batch {len(adv)}")
    main_view = _local_view(params, params.bn_copy())
    if ctx.update_threads == 2:
        aux_view = _local_view(params, params.bn_copy())
        fut = ctx.pool("halves").submit(half_loss_and_grads, aux_view, adv, Branch.AUX, phase)
        lc, gc = half_loss_and_grads(main_view, clean, Branch.MAIN, phase)
        la, ga = fut.result()
        bn = main_view.bn
        for name, state in bn.items():
            state.aux_mean, state.aux_var = aux_view.bn[name].aux_mean, aux_view.bn[name].aux_var
    else:
        lc, gc = half_loss_and_grads(main_view, clean, Branch.MAIN, phase)
        la, ga = half_loss_and_grads(main_view, adv, Branch.AUX, phase)
        bn = main_view.bn
    loss = 0.5 * (lc + la)
    grads = {k: 0.5 * (gc[k] + ga[k]) for k in gc}
    return loss, grads, bn


def sharded_gradient(params: ModelParams, clean: LabeledBatch, adv: LabeledBatch | None, k: int,
                     phase: Phase = Phase.EVAL) -> tuple[float, Grads]:
    """Split one global batch into ``k`` contiguous equal shards and aggregate.

    With frozen BN statistics (``Phase.EVAL``) every example's loss is
    independent of its batch mates, so the result must match the
    single-worker gradient of the whole batch.
    """
    n = len(clean)
    if k <= 0 or n % k:
        raise ValueError(f"global batch of {n} cannot be split into {k} equal shards")
    ctx = StepContext(batch_fn=lambda w, t: clean, attack=AttackConfig(), train_phase=phase)
    size = n // k
    results = []
    for i in range(k):
        sl = slice(i * size, (i + 1) * size)
        part = LabeledBatch(clean.inputs[sl], clean.labels[sl])
        adv_part = None if adv is None else LabeledBatch(adv.inputs[sl], adv.labels[sl])
        results.append(_run_halves(params, part, adv_part, ctx))
    return sum(r[0] for r in results) / k, aggregate([r[1] for r in results])


def _map_workers(fn, workers: Sequence[WorkerState], ctx: StepContext) -> list:
    if ctx.worker_threads > 1 and len(workers) > 1:
        return list(ctx.pool("workers").map(fn, workers))
    return [fn(w) for w in workers]


def _apply_update(agg: AggregatorState, results: list, workers: Sequence[WorkerState]) -> tuple[float, float, float]:
    losses = [r[0] for r in results]
    grads = aggregate([r[1] for r in results])
    for w, r in zip(workers, results):
        w.bn = r[2]
    # worker 0's post-step statistics become canonical
    agg.params.bn = results[0][2]
    lr = lr_schedule(agg.step, agg.schedule)
    if agg.optimizer == "lars":
        lars_step(agg.params.tensors, grads, agg.opt, agg.params.roles, lr=lr)
    else:
        sgd_momentum_step(agg.params.tensors, grads, agg.opt, lr=lr)
    agg.step += 1
    loss = 0.0
    for value in losses:
        loss += value
    return loss / len(losses), global_norm(grads), lr


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


# ---------------------------------------------------------------- protocols


def vanilla_step(agg: AggregatorState, workers: Sequence[WorkerState], ctx: StepContext) -> StepMetrics:
    t0 = time.perf_counter()
    t = agg.step
    for w in workers:
        w.clean = ctx.batch_fn(w.worker_id, t)
    results = _map_workers(lambda w: _run_halves(agg.params, w.clean, None, ctx), workers, ctx)
    loss, gnorm, lr = _apply_update(agg, results, workers)
    elapsed = _ms(t0)
    return StepMetrics(t, loss, gnorm, lr, elapsed, 0.0, elapsed)


def disadv_step(agg: AggregatorState, workers: Sequence[WorkerState], ctx: StepContext) -> StepMetrics:
    """Craft against the current weights, then update: two sequential phases."""
    t0 = time.perf_counter()
    t = agg.step
    for w in workers:
        w.clean = ctx.batch_fn(w.worker_id, t)

    def gen(w: WorkerState) -> LabeledBatch:
        if ctx.trace is not None:
            ctx.trace.record(w.worker_id, w.clean.indices)
        seed = attack_seed_for(ctx.attack_seed, w.worker_id, t)
        return generate_adversarial(agg.params, w.clean, ctx.attack, seed)

    advs = _map_workers(gen, workers, ctx)  # barrier: every worker's batch is ready
    t_gen = _ms(t0)
    t1 = time.perf_counter()
    results = _map_workers(lambda pair: _run_halves(agg.params, pair[0].clean, pair[1], ctx), list(zip(workers, advs)), ctx)
    loss, gnorm, lr = _apply_update(agg, results, workers)
    t_update = _ms(t1)
    return StepMetrics(t, loss, gnorm, lr, t_update, t_gen, _ms(t0))


def prime_buffers(agg: AggregatorState, workers: Sequence[WorkerState], tau: int, ctx: StepContext) -> None:
    """Fill each buffer with the batches of steps [0, tau) crafted from the initial weights."""
    snapshot = agg.params.snapshot()
    last = tau if ctx.total_steps is None else min(tau, ctx.total_steps)
    for w in workers:
        for target in range(agg.step, agg.step + last):
            w.buffer.push(BufferEntry(0, target, craft(snapshot, w.worker_id, target, ctx)))


def conadv_step(agg: AggregatorState, workers: Sequence[WorkerState], tau: int, ctx: StepContext) -> StepMetrics:
    """One step of the stale-buffer protocol.

    (a) consume the batch crafted from the weights of step t - tau and
    compute the combined gradient at the current weights; (b) from an
    immutable snapshot of the current weights craft the batch for step
    t + tau. In overlap execution (b) runs on a background thread while (a),
    aggregation and the optimizer step run on the calling thread.
    """
    if tau < 0:
        raise ValueError(f"staleness must be >= 0, got {tau}")
    t0 = time.perf_counter()
    t = agg.step
    snapshot = agg.params.snapshot()
    target = t + tau
    produce = ctx.total_steps is None or target < ctx.total_steps
    gen_times: list[float] = []

    def gen_all() -> list[LabeledBatch]:
        g0 = time.perf_counter()
        out = [craft(snapshot, w.worker_id, target, ctx) for w in workers]
        gen_times.append(_ms(g0))
        return out

    if tau == 0:
        # degenerate pipeline: craft now, consume now
        for w, adv in zip(workers, gen_all()):
            w.buffer.push(BufferEntry(t, t, adv))
        produce = False

    future: Future | None = None
    if produce and ctx.execution == "overlap":
        future = ctx.pool("gen").submit(gen_all)

    t1 = time.perf_counter()
    for w in workers:
        w.clean = ctx.batch_fn(w.worker_id, t)
    consumed = [w.buffer.pop(t).batch for w in workers]
    results = _map_workers(lambda pair: _run_halves(agg.params, pair[0].clean, pair[1], ctx), list(zip(workers, consumed)), ctx)
    loss, gnorm, lr = _apply_update(agg, results, workers)
    t_update = _ms(t1)

    if produce:
        fresh = future.result() if future is not None else gen_all()
        for w, adv in zip(workers, fresh):
            w.buffer.push(BufferEntry(t, target, adv))
    t_gen = sum(gen_times)
    return StepMetrics(t, loss, gnorm, lr, t_update, t_gen, _ms(t0))


# ---------------------------------------------------------------- training loop


@dataclass
class MetricsTrace:
    steps: list[StepMetrics] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    params: ModelParams | None = None
    path: Path | None = None

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1]["test_acc"] if self.epochs else float("nan")


TIMING_FIELDS = ("t_update_ms", "t_gen_ms", "t_step_ms")


class MetricsWriter:
    """Append-only JSON-lines sink; one record per line, ``type`` first."""

    def __init__(self, path: Path | None):
        self.path = path
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=False) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def build_state(cfg: TrainConfig, dataset: Dataset) -> tuple[AggregatorState, list[WorkerState], BatchSchedule]:
    arch = make_architecture(cfg.model, dataset.input_shape, dataset.num_classes, cfg.width_tuple())
    params = init_params(arch, cfg.init_seed, cfg.bn_momentum, cfg.bn_eps)
    n = len(dataset)
    T = cfg.total_steps(n)
    schedule = ScheduleConfig(cfg.schedule, cfg.peak_lr(), cfg.warmup_steps(n), T)
    opt = OptimState(lr=cfg.peak_lr(), momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                     trust_coef=cfg.trust_coef, eps=cfg.lars_eps)
    agg = AggregatorState(params, opt, schedule, cfg.optimizer)
    shards = shard_dataset(n, cfg.workers, cfg.data_seed)
    tau = cfg.tau if cfg.protocol == "conadv" else 0
    workers = [WorkerState(k, shards[k], StaleBuffer(tau)) for k in range(cfg.workers)]
    sched = BatchSchedule(dataset, shards, cfg.local_batch(), cfg.data_seed, cfg.augmentation)
    return agg, workers, sched


def eval_steps(cfg: TrainConfig, n_train: int, total: int) -> dict[int, int]:
    """Map from 'steps completed' to epoch number at which test accuracy is recorded."""
    if cfg.eval_every <= 0:
        return {total: max(cfg.epochs, 1)}
    marks = {}
    if cfg.steps > 0:
        per_epoch = n_train / cfg.global_batch
        epochs = max(1, math.ceil(total / per_epoch))
    else:
        epochs = cfg.epochs
    for e in range(cfg.eval_every, epochs + 1, cfg.eval_every):
        marks[min(math.ceil(e * n_train / cfg.global_batch), total)] = e
    marks.setdefault(total, epochs)
    return marks


def run_training(cfg: TrainConfig, dataset: Dataset, metrics_path=None, trace: AccessTrace | None = None,
                 write_metrics: bool = True) -> MetricsTrace:
    """Train under ``cfg`` and persist a JSON-lines metrics file.

    Step records carry step, loss, grad_norm, lr and the three timing fields;
    epoch records carry epoch, step and test_acc. Everything except the
    timing fields is a deterministic function of the config.
    """
    cfg.validate()
    agg, workers, sched = build_state(cfg, dataset)
    total = agg.schedule.total_steps
    ctx = StepContext(
        batch_fn=sched,
        attack=cfg.attack(),
        attack_seed=cfg.attack_seed,
        execution=cfg.execution,
        update_threads=cfg.update_threads,
        worker_threads=cfg.worker_threads,
        train_phase=Phase.TRAIN if cfg.bn_train_stats == "batch" else Phase.EVAL,
        total_steps=total,
        trace=trace,
    )
    path = None
    if write_metrics:
        path = Path(metrics_path) if metrics_path is not None else cfg.metrics_path()
    writer = MetricsWriter(path)
    out = MetricsTrace(path=path)
    marks = eval_steps(cfg, len(dataset), total)
    writer.write({"type": "config", **cfg.as_dict(), "total_steps": total, "n_train": len(dataset)})
    try:
        if cfg.protocol == "conadv" and cfg.tau > 0:
            prime_buffers(agg, workers, cfg.tau, ctx)
        for _ in range(total):
            if cfg.protocol == "vanilla":
                m = vanilla_step(agg, workers, ctx)
            elif cfg.protocol == "disadv":
                m = disadv_step(agg, workers, ctx)
            else:
                m = conadv_step(agg, workers, cfg.tau, ctx)
            if not math.isfinite(m.loss):
                raise FloatingPointError(f"non-finite loss at step {m.step}")
            out.steps.append(m)
            writer.write({"type": "step", **m.__dict__})
            if agg.step in marks:
                acc = accuracy(agg.params, dataset.test_x, dataset.test_y)
                rec = {"type": "epoch", "epoch": marks[agg.step], "step": agg.step, "test_acc": acc}
                out.epochs.append(rec)
                writer.write(rec)
                log.info("epoch %d step %d test_acc %.4f", rec["epoch"], agg.step, acc)
    finally:
        ctx.close()
        writer.close()
    out.params = agg.params
    return out
