"""Command-line entry point: ``conadv {train,bench,probe,sweep,report}``.

Every TrainConfig field is also a flag (``--global-batch 512``); flags
override ``--config FILE``, which overrides the defaults. ``CONADV_OUTPUT_DIR``
overrides ``output_dir`` from any source.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, apply_overrides, load_config, save_config
from .experiments import augmentation_trend, cached_dataset, emit_report, render_report, run_many, seeded, sweep_perturbation
from .theory import QuadraticMinMax, RateConfig, certify_bounds, check_rate, decay_slope
from .throughput import ThroughputModel, bench_wallclock, calibrate_costs, throughput_table

log = logging.getLogger("conadv")

OUTPUT_ENV = "CONADV_OUTPUT_DIR"


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value run configuration file")
    group = parser.add_argument_group("run configuration (overrides --config)")
    for f in dataclasses.fields(TrainConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE",
                           help=f"default: {f.default}")


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    cfg = apply_overrides(cfg, overrides)
    if os.environ.get(OUTPUT_ENV):
        cfg = cfg.replace(output_dir=os.environ[OUTPUT_ENV])
    return cfg.validate()


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    seeds = _int_list(args.seeds) if args.seeds else None
    cfgs = [seeded(cfg, s) for s in seeds] if seeds else [cfg]
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    save_config(cfgs[0], Path(cfg.output_dir) / f"{cfgs[0].run_name()}.conf")
    for summary in run_many(cfgs, args.parallel_runs):
        _print_json(summary)
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    out: dict = {}
    batches = _int_list(args.batches)
    if args.mode in ("simulate", "both"):
        if args.t_fwd and args.t_bwd and args.t_attack:
            model = ThroughputModel(args.t_fwd, args.t_bwd, args.t_attack, args.processors, args.capacity)
            source = "supplied"
        else:
            from .distributed import BatchSchedule, build_state

            ds = cached_dataset(cfg.dataset)
            agg, _, _ = build_state(cfg, ds)
            batch = BatchSchedule(ds, [list(range(len(ds)))], args.capacity, cfg.data_seed)(0, 0)
            model = calibrate_costs(agg.params, batch)
            model = dataclasses.replace(model, processors=args.processors)
            source = "calibrated"
        out["model"] = {**dataclasses.asdict(model), "source": source}
        out["simulated"] = throughput_table(model, batches)
    if args.mode in ("wallclock", "both"):
        result = bench_wallclock(cfg, cached_dataset(cfg.dataset), warmup=args.warmup_steps, timed=args.timed_steps,
                                 update_threads=args.overlap_update_threads)
        out["wallclock"] = result.to_dict()
    _print_json(out)
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, default=float))
    return 0


def cmd_probe(args) -> int:
    problem = QuadraticMinMax.random(args.seed, p=args.p, q=args.q, n=args.n, mu=args.mu, eps=args.eps,
                                     coupling=args.coupling)
    report = certify_bounds(problem, steps=args.steps, taus=_int_list(args.taus), pairs=args.pairs, seed=args.seed)
    if args.rate:
        cfg = RateConfig(Ts=tuple(_int_list(args.Ts)), seeds=args.seeds, taus=tuple(_int_list(args.taus)),
                             seed=args.seed)
        thm = check_rate(problem, cfg)
        report.extend(thm)
        for tau in cfg.taus:
            report.constants[f"decay_slope[tau={tau}]"] = decay_slope(thm, tau)
    data = report.to_dict()
    text = json.dumps(data, indent=2, default=float)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        print(text)
    print(report.table(), file=sys.stderr if not args.out else sys.stdout)
    return 0 if report.passed else 1


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    seeds = _int_list(args.seeds)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "perturbation":
        table = sweep_perturbation(cfg, _float_list(args.p_values), seeds, args.parallel_runs,
                                   alpha_equals_epsilon=not args.keep_alpha)
        (out_dir / f"sweep-{cfg.protocol}-b{cfg.global_batch}.csv").write_text(table.to_csv())
        print(table.text())
        best = table.best()
        print(f"best p = {best.p:g} (epsilon {best.epsilon:.5f}), mean accuracy {best.mean:.4f}")
    else:
        trend = augmentation_trend(cfg, _int_list(args.batches), seeds, args.parallel_runs)
        (out_dir / "augmentation-trend.csv").write_text(trend.to_csv())
        print(trend.text())
    return 0


def cmd_report(args) -> int:
    paths = list(args.files)
    for d in args.dir or []:
        paths += sorted(Path(d).glob("*.jsonl")) + sorted(Path(d).glob("*.json"))
    if not paths:
        print("no input files", file=sys.stderr)
        return 2
    report = emit_report(paths, args.out)
    print(render_report(report), end="")
    return 0 if report.runs or report.probe_margins else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conadv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one config (optionally several seeds)")
    _add_config_flags(p)
    p.add_argument("--seeds", help="comma list; sets data, init and attack seed together")
    p.add_argument("--parallel-runs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="throughput model and wall-clock overlap benchmark")
    _add_config_flags(p)
    p.add_argument("--mode", choices=("simulate", "wallclock", "both"), default="both")
    p.add_argument("--batches", default="512,1024,2048,4096,8192")
    p.add_argument("--t-fwd", type=float, help="ms; with --t-bwd and --t-attack skips calibration")
    p.add_argument("--t-bwd", type=float)
    p.add_argument("--t-attack", type=float)
    p.add_argument("--processors", type=int, help="processor budget; default: 2 per worker")
    p.add_argument("--capacity", type=int, default=64, help="examples per worker")
    p.add_argument("--warmup-steps", type=int, default=2, help="untimed steps per run")
    p.add_argument("--timed-steps", type=int, default=8, help="timed steps per run")
    p.add_argument("--overlap-update-threads", type=int, default=2, choices=(1, 2),
                   help="threads for the two update halves in every timed run")
    p.add_argument("--out", help="also write the JSON result here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("probe", help="certify the convergence bounds on a synthetic min-max problem")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=int, default=4)
    p.add_argument("--q", type=int, default=2)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--coupling", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--taus", default="1,2,4")
    p.add_argument("--pairs", type=int, default=10_000)
    p.add_argument("--rate", action="store_true", help="also run the rate check (slow)")
    p.add_argument("--Ts", default="250,500,1000,2000,4000")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="perturbation sweep or augmentation trend")
    _add_config_flags(p)
    p.add_argument("--kind", choices=("perturbation", "augmentation"), default="perturbation")
    p.add_argument("--p-values", default="0,1,2,4,8", help="epsilon = p / 255")
    p.add_argument("--keep-alpha", action="store_true", help="do not set alpha = epsilon")
    p.add_argument("--batches", default="128,2048,8192")
    p.add_argument("--seeds", default="0")
    p.add_argument("--parallel-runs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize metrics and probe files")
    p.add_argument("files", nargs="*", type=Path)
    p.add_argument("--dir", action="append", help="include every .jsonl/.json in this directory")
    p.add_argument("--out", type=Path, help="write report.txt and CSV tables here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for key, msg in exc.errors:
            print(f"config error: {key}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
