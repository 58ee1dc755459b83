"""Compiled vs numpy kernels: timing and bitwise agreement.

    python3 benchmarks/bench_kernels.py [--batch 2048] [--repeats 7] [--json out.json]

Shapes follow the CNN preset on 12x12 single-channel images.
"""

from __future__ import annotations

import argparse
import json
import statistics
import time

import numpy as np

from conadv import _kernels_py

try:
    from conadv import _kernels
except ImportError:  # extension not built
    _kernels = None


def _time(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def cases(batch: int, rng: np.random.Generator) -> dict:
    x1 = rng.random((batch, 12, 12, 1))
    x2 = rng.standard_normal((batch, 6, 6, 16))
    cols = rng.standard_normal((batch, 6, 6, 3, 3, 16))
    pool_in = rng.standard_normal((batch, 12, 12, 16))
    _, arg = _kernels_py.maxpool2_forward(pool_in)
    dpool = rng.standard_normal((batch, 6, 6, 16))
    bn_x = rng.standard_normal((batch * 36, 32))
    gamma, beta = rng.standard_normal(32), rng.standard_normal(32)
    mean, var = rng.standard_normal(32), rng.random(32) + 0.5
    _, xhat, _, _, invstd = _kernels_py.batchnorm_train_forward(bn_x, gamma, beta, 1e-5)
    g = rng.standard_normal(bn_x.shape)
    return {
        "im2col conv1": ("im2col", (x1, 3, 3, 1)),
        "im2col conv2": ("im2col", (x2, 3, 3, 1)),
        "col2im conv2": ("col2im", (cols, 6, 6, 1)),
        "maxpool2 forward": ("maxpool2_forward", (pool_in,)),
        "maxpool2 backward": ("maxpool2_backward", (dpool, arg, 12, 12)),
        "batchnorm train forward": ("batchnorm_train_forward", (bn_x, gamma, beta, 1e-5)),
        "batchnorm eval forward": ("batchnorm_eval_forward", (bn_x, gamma, beta, mean, var, 1e-5)),
        "batchnorm backward": ("batchnorm_backward", (g, xhat, gamma, invstd, True)),
    }


def run(batch: int = 2048, repeats: int = 7, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, (fn, args) in cases(batch, rng).items():
        py = getattr(_kernels_py, fn)
        row = {"kernel": name, "python_ms": _time(lambda: py(*args), repeats)}
        if _kernels is not None:
            cy = getattr(_kernels, fn)
            row["cython_ms"] = _time(lambda: cy(*args), repeats)
            row["speedup"] = row["python_ms"] / row["cython_ms"]
            row["bitwise_equal"] = _same(py(*args), cy(*args))
        rows.append(row)
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=2048)
    parser.add_argument("--repeats", type=int, default=7)
    parser.add_argument("--json", help="write rows to this file")
    args = parser.parse_args()
    rows = run(args.batch, args.repeats)
    if _kernels is None:
        print("compiled extension not built; python timings only")
    print(f"{'kernel':<26} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'equal':>6}")
    for r in rows:
        print(f"{r['kernel']:<26} {r['python_ms']:>10.2f} {r.get('cython_ms', float('nan')):>10.2f} "
              f"{r.get('speedup', float('nan')):>8.2f} {str(r.get('bitwise_equal', '-')):>6}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
