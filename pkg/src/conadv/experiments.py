"""Multi-run experiments (perturbation sweep, augmentation trend) and reports.

Runs are independent, so they may execute in separate processes; each
process loads its dataset once per spec string.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .config import TrainConfig
from .data import Dataset, load_dataset
from .distributed import run_training

log = logging.getLogger(__name__)


class CorruptMetricsError(ValueError):
    pass


@functools.lru_cache(maxsize=4)
def cached_dataset(spec: str) -> Dataset:
    return load_dataset(spec)


def seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    """Same config with every seed set to ``seed``."""
    return cfg.replace(data_seed=seed, init_seed=seed, attack_seed=seed)


def run_one(cfg: TrainConfig) -> dict:
    """Train one config and return a compact summary (picklable)."""
    trace = run_training(cfg, cached_dataset(cfg.dataset))
    step_ms = [m.t_step_ms for m in trace.steps]
    return {
        "run": cfg.run_name(),
        "protocol": cfg.protocol,
        "global_batch": cfg.global_batch,
        "tau": cfg.tau,
        "epsilon": cfg.epsilon,
        "augmentation": cfg.augmentation,
        "seed": cfg.init_seed,
        "final_acc": trace.final_accuracy,
        "steps": len(trace.steps),
        "median_step_ms": statistics.median(step_ms) if step_ms else float("nan"),
        "metrics": str(trace.path) if trace.path else "",
    }


def run_many(cfgs: Sequence[TrainConfig], parallel: int = 1) -> list[dict]:
    """Run configs in order, or ``parallel`` at a time in worker processes."""
    for cfg in cfgs:
        cfg.validate()
    if parallel <= 1 or len(cfgs) <= 1:
        return [run_one(cfg) for cfg in cfgs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(run_one, cfgs))


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    mean = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, sd


# ---------------------------------------------------------------- perturbation sweep


@dataclass
class SweepRow:
    p: float
    epsilon: float
    accs: list[float]

    @property
    def mean(self) -> float:
        return _mean_sd(self.accs)[0]

    @property
    def sd(self) -> float:
        return _mean_sd(self.accs)[1]


@dataclass
class SweepTable:
    protocol: str
    global_batch: int
    rows: list[SweepRow] = field(default_factory=list)

    def best(self) -> SweepRow:
        return max(self.rows, key=lambda r: r.mean)

    def row(self, p: float) -> SweepRow:
        for r in self.rows:
            if r.p == p:
                return r
        raise KeyError(p)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "epsilon", "mean_acc", "sd_acc", "n_seeds", "accs"])
        for r in self.rows:
            w.writerow([r.p, r.epsilon, f"{r.mean:.6f}", f"{r.sd:.6f}", len(r.accs), " ".join(f"{a:.6f}" for a in r.accs)])
        return buf.getvalue()

    def text(self) -> str:
        lines = [f"perturbation sweep: {self.protocol}, global batch {self.global_batch}",
                 f"{'p':>6} {'epsilon':>9} {'mean acc':>9} {'sd':>8} {'seeds':>6}"]
        for r in self.rows:
            lines.append(f"{r.p:>6g} {r.epsilon:>9.5f} {r.mean:>9.4f} {r.sd:>8.4f} {len(r.accs):>6}")
        return "\n".join(lines)


def sweep_configs(cfg: TrainConfig, p_values: Iterable[float], seeds: Sequence[int],
                  alpha_equals_epsilon: bool = True) -> list[tuple[float, TrainConfig]]:
    out = []
    for p in p_values:
        eps = float(p) / 255.0
        alpha = eps if alpha_equals_epsilon else cfg.alpha
        for s in seeds:
            out.append((float(p), seeded(cfg, s).replace(epsilon=eps, alpha=alpha)))
    return out


def sweep_perturbation(cfg: TrainConfig, p_values: Sequence[float], seeds: Sequence[int] = (0,),
                       parallel: int = 1, alpha_equals_epsilon: bool = True) -> SweepTable:
    """One run per (p, seed) with epsilon = p / 255; table of final clean accuracy."""
    jobs = sweep_configs(cfg, p_values, seeds, alpha_equals_epsilon)
    results = run_many([c for _, c in jobs], parallel)
    table = SweepTable(cfg.protocol, cfg.global_batch)
    for p in p_values:
        accs = [r["final_acc"] for (q, _), r in zip(jobs, results) if q == float(p)]
        table.rows.append(SweepRow(float(p), float(p) / 255.0, accs))
    return table


# ---------------------------------------------------------------- augmentation trend


@dataclass
class TrendRow:
    global_batch: int
    plain: list[float]
    augmented: list[float]

    @property
    def delta(self) -> float:
        return statistics.fmean(self.augmented) - statistics.fmean(self.plain)


@dataclass
class TrendTable:
    rows: list[TrendRow]

    @property
    def deltas(self) -> list[float]:
        return [r.delta for r in self.rows]

    def non_increasing(self) -> bool:
        d = self.deltas
        return all(b <= a for a, b in zip(d, d[1:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["global_batch", "mean_acc_none", "mean_acc_flip_crop", "delta", "n_seeds"])
        for r in self.rows:
            w.writerow([r.global_batch, f"{statistics.fmean(r.plain):.6f}", f"{statistics.fmean(r.augmented):.6f}",
                        f"{r.delta:+.6f}", len(r.plain)])
        return buf.getvalue()

    def text(self) -> str:
        lines = ["flip-crop gain over no augmentation",
                 f"{'batch':>7} {'none':>8} {'flip-crop':>10} {'delta':>9}"]
        for r in self.rows:
            lines.append(f"{r.global_batch:>7} {statistics.fmean(r.plain):>8.4f} "
                         f"{statistics.fmean(r.augmented):>10.4f} {r.delta:>+9.4f}")
        lines.append(f"non-increasing: {'yes' if self.non_increasing() else 'no'}")
        return "\n".join(lines)


def augmentation_trend(cfg: TrainConfig, batches: Sequence[int], seeds: Sequence[int],
                       parallel: int = 1) -> TrendTable:
    """Vanilla runs with and without flip-crop at each global batch, fixed epochs."""
    jobs = []
    for b in batches:
        for aug in ("none", "flip-crop"):
            for s in seeds:
                jobs.append((b, aug, seeded(cfg, s).replace(protocol="vanilla", global_batch=b, augmentation=aug)))
    results = run_many([c for *_, c in jobs], parallel)
    rows = []
    for b in batches:
        pick = lambda aug: [r["final_acc"] for (bb, a, _), r in zip(jobs, results) if bb == b and a == aug]  # noqa: E731
        rows.append(TrendRow(b, pick("none"), pick("flip-crop")))
    return TrendTable(rows)


# ---------------------------------------------------------------- reports


def read_metrics(path) -> dict:
    """Parse a JSON-lines metrics file into its config, step and epoch records."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CorruptMetricsError(f"{path}: {exc.strerror or exc}") from exc
    config, steps, epochs = None, [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptMetricsError(f"{path}:{lineno}: {exc.msg}") from exc
        kind = rec.get("type") if isinstance(rec, dict) else None
        if kind == "config":
            config = rec
        elif kind == "step":
            steps.append(rec)
        elif kind == "epoch":
            epochs.append(rec)
        else:
            raise CorruptMetricsError(f"{path}:{lineno}: record without a known type")
    if config is None:
        raise CorruptMetricsError(f"{path}: no config record")
    return {"config": config, "steps": steps, "epochs": epochs}


def summarize_run(path, data: dict) -> dict:
    cfg = data["config"]
    step_ms = [s["t_step_ms"] for s in data["steps"]]
    median_ms = statistics.median(step_ms) if step_ms else float("nan")
    acc = data["epochs"][-1]["test_acc"] if data["epochs"] else float("nan")
    return {
        "file": str(path),
        "protocol": cfg.get("protocol"),
        "global_batch": cfg.get("global_batch"),
        "tau": cfg.get("tau") if cfg.get("protocol") == "conadv" else "",
        "epsilon": cfg.get("epsilon") if cfg.get("protocol") != "vanilla" else "",
        "augmentation": cfg.get("augmentation"),
        "seed": cfg.get("init_seed"),
        "steps": len(data["steps"]),
        "final_acc": acc,
        "median_step_ms": median_ms,
        "images_per_ms": cfg.get("global_batch", 0) / median_ms if median_ms and median_ms > 0 else float("nan"),
    }


@dataclass
class Report:
    runs: list[dict]
    accuracy_vs_batch: list[dict]
    throughput_vs_batch: list[dict]
    probe_margins: list[dict]
    warnings: list[str]

    @property
    def warning_count(self) -> int:
        return len(self.warnings)


def _group(runs: list[dict], value: str) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in runs:
        key = (r["protocol"], r["global_batch"], r["augmentation"])
        v = r[value]
        if isinstance(v, (int, float)) and math.isfinite(v):
            groups.setdefault(key, []).append(float(v))
    out = []
    for (proto, batch, aug), vals in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0], kv[0][2])):
        mean, sd = _mean_sd(vals)
        out.append({"protocol": proto, "global_batch": batch, "augmentation": aug, f"mean_{value}": mean,
                    f"sd_{value}": sd, "runs": len(vals)})
    return out


def _probe_rows(path, data: dict) -> list[dict]:
    rows = []
    for check in data.get("checks", []):
        bound = check.get("bound")
        measured = check.get("measured_max")
        rows.append({
            "file": str(path),
            "check": check.get("name"),
            "bound": bound,
            "measured_max": measured,
            "ratio": check.get("max_ratio"),
            "violations": check.get("violations"),
        })
    return rows


def build_report(paths: Iterable) -> Report:
    """Collect metrics (``.jsonl``) and probe reports (``.json``); bad files become warnings."""
    runs, probes, warnings = [], [], []
    for p in paths:
        p = Path(p)
        try:
            if p.suffix == ".json":
                try:
                    data = json.loads(p.read_text())
                except (OSError, json.JSONDecodeError) as exc:
                    raise CorruptMetricsError(f"{p}: {exc}") from exc
                if not isinstance(data, dict) or "checks" not in data:
                    raise CorruptMetricsError(f"{p}: not a probe report")
                probes.extend(_probe_rows(p, data))
            else:
                runs.append(summarize_run(p, read_metrics(p)))
        except CorruptMetricsError as exc:
            log.warning("skipping %s", exc)
            warnings.append(str(exc))
    return Report(runs, _group(runs, "final_acc"), _group(runs, "images_per_ms"), probes, warnings)


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}" if math.isfinite(v) else "nan"
    return str(v)


def _text_table(title: str, rows: list[dict]) -> str:
    if not rows:
        return f"{title}\n  (none)\n"
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = [title, "  " + "  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  " + "  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def render_report(report: Report) -> str:
    parts = [
        _text_table("runs", report.runs),
        _text_table("accuracy vs batch size", report.accuracy_vs_batch),
        _text_table("throughput vs batch size (images/ms)", report.throughput_vs_batch),
        _text_table("probe bound margins", report.probe_margins),
        f"warnings: {report.warning_count}",
    ]
    parts += [f"  {w}" for w in report.warnings]
    return "\n".join(parts) + "\n"


def emit_report(paths: Iterable, out_dir=None) -> Report:
    """Build the report and, when ``out_dir`` is given, write report.txt plus one CSV per table."""
    report = build_report(paths)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(render_report(report))
        for name in ("runs", "accuracy_vs_batch", "throughput_vs_batch", "probe_margins"):
            (out / f"{name}.csv").write_text(_csv(getattr(report, name)))
    return report
