"""Central-difference gradient checks for every op and for the model losses.

Each case builds a tiny graph around one op, reduces its output to a scalar
with a fixed random projection, and compares the analytic gradient of every
differentiable leaf against :func:`finite_diff_check` at seeded points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import BatchNormMode, Graph, Tensor, finite_diff_check
from .model import (
    Branch,
    _bn_modes,
    build_graph,
    LabeledBatch,
    Phase,
    evaluate,
    init_params,
    loss_and_grads,
    make_architecture,
)

H = 1e-5
TOL = 1e-6


@dataclass
class CheckCase:
    graph: Graph
    bindings: dict
    wrt: tuple[str, ...]
    bn: dict | None = None


def _project(g: Graph, node: int, size: int, per_example: bool = True) -> int:
    """Scalar sum(out * r) via two matmuls against the bound leaves ``r`` and ``ones``."""
    flat = g.flatten(node, size) if per_example else node
    return g.matmul(g.matmul(flat, g.param("r")), g.param("ones"))


def _case(op: str, rng: np.random.Generator) -> CheckCase:
    g = Graph()
    n = 3
    if op == "dense":
        x, w, b = g.input("x"), g.param("w"), g.param("b")
        out = g.dense(x, w, b)
        g.output("loss", _project(g, out, 2, per_example=False))
        bind = {"x": rng.standard_normal((n, 4)), "w": rng.standard_normal((4, 2)), "b": rng.standard_normal(2),
                "r": rng.standard_normal(2), "ones": np.ones(n)}
        return CheckCase(g, bind, ("x", "w", "b"))
    if op in ("conv2d_same", "conv2d_valid"):
        pad = op.split("_")[1]
        x, w, b = g.input("x"), g.param("w"), g.param("b")
        out = g.conv2d(x, w, b, padding=pad)
        side = 5 if pad == "same" else 3
        g.output("loss", _project(g, out, side * side * 2))
        bind = {"x": rng.standard_normal((2, 5, 5, 2)), "w": rng.standard_normal((3, 3, 2, 2)),
                "b": rng.standard_normal(2), "r": rng.standard_normal(side * side * 2), "ones": np.ones(2)}
        return CheckCase(g, bind, ("x", "w", "b"))
    if op == "relu":
        out = g.relu(g.input("x"))
        g.output("loss", _project(g, out, 6, per_example=False))
        return CheckCase(g, {"x": rng.standard_normal((n, 6)), "r": rng.standard_normal(6), "ones": np.ones(n)}, ("x",))
    if op == "maxpool2":
        out = g.maxpool2(g.input("x"))
        g.output("loss", _project(g, out, 2 * 2 * 2))
        bind = {"x": rng.standard_normal((n, 4, 5, 2)), "r": rng.standard_normal(8), "ones": np.ones(n)}
        return CheckCase(g, bind, ("x",))
    if op in ("batchnorm_train", "batchnorm_eval"):
        x, gamma, beta = g.input("x"), g.param("gamma"), g.param("beta")
        out = g.batchnorm(x, gamma, beta, key="bn")
        g.output("loss", _project(g, out, 2 * 2 * 3))
        bind = {"x": rng.standard_normal((4, 2, 2, 3)), "gamma": rng.standard_normal(3), "beta": rng.standard_normal(3),
                "r": rng.standard_normal(12), "ones": np.ones(4)}
        mode = BatchNormMode(rng.standard_normal(3), rng.random(3) + 0.5, op == "batchnorm_train")
        return CheckCase(g, bind, ("x", "gamma", "beta"), {"bn": mode})
    if op == "softmax_xent":
        logits = g.input("logits")
        g.output("loss", g.softmax_xent(logits, g.labels("y")))
        bind = {"logits": 3.0 * rng.standard_normal((n, 5)), "y": rng.integers(0, 5, n)}
        return CheckCase(g, bind, ("logits",))
    if op == "add_scale":
        a, b = g.input("a"), g.input("b")
        out = g.scale(g.add(a, b), -1.7)
        g.output("loss", _project(g, out, 4, per_example=False))
        bind = {"a": rng.standard_normal((n, 4)), "b": rng.standard_normal((n, 4)), "r": rng.standard_normal(4),
                "ones": np.ones(n)}
        return CheckCase(g, bind, ("a", "b"))
    if op == "matmul":
        a, b = g.input("a"), g.input("b")
        out = g.matmul(a, b)
        g.output("loss", _project(g, out, 2, per_example=False))
        bind = {"a": rng.standard_normal((n, 3)), "b": rng.standard_normal((3, 2)), "r": rng.standard_normal(2),
                "ones": np.ones(n)}
        return CheckCase(g, bind, ("a", "b"))
    raise ValueError(op)


OPS = ("dense", "conv2d_same", "conv2d_valid", "relu", "maxpool2", "batchnorm_train", "batchnorm_eval",
       "softmax_xent", "add_scale", "matmul")


def _graph_fn(case: CheckCase, leaf: str) -> Callable:
    def f(v: np.ndarray):
        b = {k: (Tensor(val) if k != "y" else val) for k, val in case.bindings.items()}
        b[leaf] = Tensor(v)
        case.graph.forward(b, case.bn)
        grads = case.graph.backward("loss", [leaf])
        return float(case.graph.value(case.graph.outputs["loss"])), grads[leaf]

    return f


def op_error(op: str, seed: int, h: float = H) -> float:
    """Worst relative error over all differentiable leaves of one op case."""
    case = _case(op, np.random.default_rng([seed, OPS.index(op)]))
    return max(finite_diff_check(_graph_fn(case, leaf), case.bindings[leaf], h) for leaf in case.wrt)


KINK_MARGIN = 1e-3
MAX_REDRAWS = 50


def kink_margin(params, batch: LabeledBatch, branch: Branch, phase: Phase) -> float:
    """Distance of the forward pass from the nearest relu or max-pool switch.

    The smallest |relu input| and the smallest gap between the two largest
    entries of any pooling window. Windows of dead relu units tie at zero
    without a switch, so they are left to the relu margin. Central
    differences are only meaningful where this is large compared with the step.
    """
    g = build_graph(params.arch)
    bindings: dict[str, object] = {name: Tensor(arr) for name, arr in params.copy().tensors.items()}
    bindings["x"] = Tensor(batch.inputs)
    bindings["y"] = batch.labels
    g.forward(bindings, _bn_modes(params, branch, phase))
    margin = np.inf
    for node in g.nodes:
        if node.op not in ("relu", "maxpool2"):
            continue
        v = g.value(node.inputs[0])
        if node.op == "relu":
            margin = min(margin, float(np.abs(v).min()))
            continue
        n, h, w, c = v.shape
        win = v[:, : h - h % 2, : w - w % 2, :].reshape(n, h // 2, 2, w // 2, 2, c)
        win = np.sort(win.transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4), axis=1)
        live = win[:, -1] != 0.0
        if live.any():
            margin = min(margin, float((win[live, -1] - win[live, -2]).min()))
    return margin


def _tiny_model(kind: str, seed: int):
    """Small model and batches, redrawn until every pass is clear of kinks."""
    for redraw in range(MAX_REDRAWS):
        params, clean, adv = _draw_tiny_model(kind, [seed, 99] if redraw == 0 else [seed, 99, redraw])
        passes = ((clean, Branch.MAIN, Phase.TRAIN), (adv, Branch.AUX, Phase.TRAIN), (clean, Branch.AUX, Phase.EVAL))
        if min(kink_margin(params, *p) for p in passes) > KINK_MARGIN:
            return params, clean, adv
    raise RuntimeError(f"no kink-free draw for seed {seed} after {MAX_REDRAWS} tries")


def _draw_tiny_model(kind: str, entropy):
    rng = np.random.default_rng(entropy)
    seed = entropy[0]
    if kind == "cnn":
        arch = make_architecture("cnn", (4, 4, 1), 3, widths=(2, 2))
        x = rng.random((3, 4, 4, 1))
    else:
        arch = make_architecture("mlp", (5,), 3, widths=(4, 3))
        x = rng.random((3, 5))
    params = init_params(arch, seed)
    for k in params.tensors:  # move away from the zero-bias / unit-scale init
        params.tensors[k] = params.tensors[k] + 0.3 * rng.standard_normal(params.tensors[k].shape)
    y = rng.integers(0, 3, x.shape[0])
    adv = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0.0, 1.0)
    for state in params.bn.values():
        state.aux_mean = 0.1 * rng.standard_normal(state.aux_mean.shape)
        state.aux_var = rng.random(state.aux_var.shape) + 0.5
    return params, LabeledBatch(x, y), LabeledBatch(adv, y)


def combined_loss_error(seed: int, kind: str = "cnn", h: float = H) -> float:
    """Half-clean (main BN) / half-adversarial (aux BN) loss against all parameters."""
    params, clean, adv = _tiny_model(kind, seed)
    names = sorted(params.tensors)
    shapes = [params.tensors[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    point = np.concatenate([params.tensors[k].ravel() for k in names])

    def f(v: np.ndarray):
        p = params.copy()
        off = 0
        for k, shape, size in zip(names, shapes, sizes):
            p.tensors[k] = v[off:off + size].reshape(shape)
            off += size
        loss, grads = loss_and_grads(p, clean, adv)
        return loss, np.concatenate([grads[k].ravel() for k in names])

    return finite_diff_check(f, point, h)


def input_grad_error(seed: int, kind: str = "cnn", h: float = H) -> float:
    """Input gradient of the attack loss (aux branch, eval statistics)."""
    params, clean, _ = _tiny_model(kind, seed)

    def f(v: np.ndarray):
        ev = evaluate(params, LabeledBatch(v, clean.labels), Branch.AUX, Phase.EVAL, reduction="sum", wrt="input")
        return ev.loss, ev.input_grad

    return finite_diff_check(f, clean.inputs, h)


CHECKS: dict[str, Callable[[int], float]] = {
    **{op: (lambda s, op=op: op_error(op, s)) for op in OPS},
    "combined_loss_cnn": lambda s: combined_loss_error(s, "cnn"),
    "combined_loss_mlp": lambda s: combined_loss_error(s, "mlp"),
    "attack_input_grad": lambda s: input_grad_error(s, "cnn"),
}


def run_all(points: int = 100, seed: int = 0) -> dict[str, float]:
    """Max relative error per check over ``points`` seeded points."""
    return {name: max(fn(seed + i) for i in range(points)) for name, fn in CHECKS.items()}
