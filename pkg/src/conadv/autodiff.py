"""Minimal reverse-mode automatic differentiation on a static graph.

A :class:`Graph` is an ordered list of nodes; each node refers only to
earlier nodes, so insertion order is a topological order. Leaves are bound
at :meth:`Graph.forward` time. :meth:`Graph.backward` produces gradients for
every bound leaf, data inputs included, which is what adversarial example
generation needs.

Activations use NHWC layout. All arithmetic is float64. Reductions go through
numpy with fixed shapes and contiguous layouts, so repeated evaluations are
bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import kernels


class GraphError(RuntimeError):
    """Misuse of a graph: unbound input, backward before forward, bad loss node."""


class ShapeError(ValueError):
    def __init__(self, node_id: int, op: str, expected, actual):
        self.node_id = node_id
        self.expected = expected
        self.actual = actual
        super().__init__(f"node {node_id} ({op}): expected shape {expected}, got {actual}")


class Tensor:
    """Dense float64 array with an optional accumulated gradient buffer."""

    __slots__ = ("values", "grad")

    def __init__(self, values, grad: np.ndarray | None = None):
        self.values = np.asarray(values, dtype=np.float64, order="C")  # keeps 0-d scalars 0-d
        if grad is not None and grad.shape != self.values.shape:
            raise ValueError(f"grad shape {grad.shape} != values shape {self.values.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    name: str | None = None
    attrs: dict = field(default_factory=dict)


@dataclass
class BatchNormMode:
    """How a batch-norm node normalizes during one forward pass.

    ``train=True`` normalizes with the batch statistics (which the graph
    records in ``Graph.batch_stats``); otherwise the running statistics given
    here are used and the node is a fixed affine map.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    train: bool
    eps: float = 1e-5


LEAF_OPS = ("input", "param", "labels")


# --------------------------------------------------------------------------
# op implementations: forward(node, args, ctx) -> (value, saved)
#                     backward(node, g, args, value, saved, needs) -> tuple of grads
# ``needs[i]`` is False when input i leads to no requested leaf; ops may
# return None there instead of computing the gradient.


def _fwd_identity(node, args, ctx):
    return args[0], None


def _bwd_identity(node, g, args, out, saved, needs):
    return (g,)


def _fwd_add(node, args, ctx):
    a, b = args
    if a.shape != b.shape:
        raise ShapeError(node.id, "add", a.shape, b.shape)
    return a + b, None


def _bwd_add(node, g, args, out, saved, needs):
    return g, g


def _fwd_scale(node, args, ctx):
    return node.attrs["factor"] * args[0], None


def _bwd_scale(node, g, args, out, saved, needs):
    return (node.attrs["factor"] * g,)


def _fwd_matmul(node, args, ctx):
    a, b = args
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(node.id, "matmul", "1-D or 2-D operands", (a.shape, b.shape))
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(node.id, "matmul", (a.shape[-1],), (b.shape[0],))
    return np.asarray(a @ b, dtype=np.float64), None


def _bwd_matmul(node, g, args, out, saved, needs):
    a, b = args
    g = np.asarray(g)
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g @ b.T, a.T @ g


def _fwd_dense(node, args, ctx):
    x, w, b = args
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(node.id, "dense", ("N", w.shape[0]), x.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError(node.id, "dense", (w.shape[1],), b.shape)
    return x @ w + b, None


def _bwd_dense(node, g, args, out, saved, needs):
    x, w, _ = args
    dx = g @ w.T if needs[0] else None
    dw = x.T @ g if needs[1] else None
    return dx, dw, (g.sum(axis=0) if needs[2] else None)


def _fwd_conv2d(node, args, ctx):
    x, w, b = args
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(node.id, "conv2d", ("N", "H", "W", w.shape[2] if w.ndim == 4 else "?"), x.shape)
    kh, kw, cin, cout = w.shape
    if b.shape != (cout,):
        raise ShapeError(node.id, "conv2d", (cout,), b.shape)
    # 'same' is exact for the odd square kernels used here
    pad = kh // 2 if node.attrs["padding"] == "same" else 0
    cols = kernels.im2col(x, kh, kw, pad)
    n, ho, wo = cols.shape[:3]
    y = cols.reshape(n * ho * wo, kh * kw * cin) @ w.reshape(kh * kw * cin, cout) + b
    return y.reshape(n, ho, wo, cout), (cols, pad)


def _bwd_conv2d(node, g, args, out, saved, needs):
    cols, pad = saved
    x, w, _ = args
    kh, kw, cin, cout = w.shape
    n, h, wd = x.shape[:3]
    g2 = g.reshape(-1, cout)
    dw = db = None
    if needs[1]:
        dw = (cols.reshape(g2.shape[0], kh * kw * cin).T @ g2).reshape(w.shape)
    if needs[2]:
        db = g2.sum(axis=0)
    if not needs[0]:
        return None, dw, db
    dcols = (g2 @ w.reshape(kh * kw * cin, cout).T).reshape(cols.shape)
    dx = kernels.col2im(dcols, h, wd, pad)
    return dx, dw, db


def _fwd_relu(node, args, ctx):
    return np.maximum(args[0], 0.0), None


def _bwd_relu(node, g, args, out, saved, needs):
    return (g * (args[0] > 0.0),)


def _fwd_maxpool2(node, args, ctx):
    x = args[0]
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(node.id, "maxpool2", ("N", ">=2", ">=2", "C"), x.shape)
    return kernels.maxpool2_forward(x)


def _bwd_maxpool2(node, g, args, out, arg, needs):
    x = args[0]
    return (kernels.maxpool2_backward(np.ascontiguousarray(g), arg, x.shape[1], x.shape[2]),)


def _fwd_reshape(node, args, ctx):
    x = args[0]
    return x.reshape((x.shape[0],) + tuple(node.attrs["shape"])), None


def _bwd_reshape(node, g, args, out, saved, needs):
    return (g.reshape(args[0].shape),)


def _fwd_batchnorm(node, args, ctx):
    x, gamma, beta = args
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(node.id, "batchnorm", (c,), (gamma.shape, beta.shape))
    key = node.attrs["key"]
    modes = ctx.get("bn") or {}
    if key not in modes:
        raise GraphError(f"node {node.id}: no batch-norm mode supplied for {key!r}")
    mode: BatchNormMode = modes[key]
    x2 = x.reshape(-1, c)
    if mode.train:
        if x2.shape[0] < 2:
            raise GraphError(f"node {node.id}: batch-norm train mode needs >= 2 values per channel")
        y, xhat, mean, var, invstd = kernels.batchnorm_train_forward(x2, gamma, beta, mode.eps)
        ctx["batch_stats"][key] = (mean, var, x2.shape[0])
    else:
        y, xhat, invstd = kernels.batchnorm_eval_forward(
            x2, gamma, beta, np.ascontiguousarray(mode.running_mean), np.ascontiguousarray(mode.running_var), mode.eps
        )
    return y.reshape(x.shape), (xhat, invstd, mode.train)


def _bwd_batchnorm(node, g, args, out, saved, needs):
    x, gamma, _ = args
    xhat, invstd, train = saved
    g2 = np.ascontiguousarray(g).reshape(xhat.shape)
    dx, dgamma, dbeta = kernels.batchnorm_backward(g2, xhat, gamma, invstd, train)
    return dx.reshape(x.shape), dgamma, dbeta


def _fwd_softmax_xent(node, args, ctx):
    logits, labels = args
    if logits.ndim != 2:
        raise ShapeError(node.id, "softmax_xent", ("N", "Z"), logits.shape)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(node.id, "softmax_xent", (logits.shape[0],), labels.shape)
    z = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= z):
        raise ValueError(f"node {node.id}: label out of range [0, {z})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    per_example = -logp[np.arange(logits.shape[0]), labels]
    total = per_example.sum()
    if node.attrs["reduction"] == "mean":
        total = total / logits.shape[0]
    return np.asarray(total, dtype=np.float64), logp


def _bwd_softmax_xent(node, g, args, out, logp, needs):
    logits, labels = args
    d = np.exp(logp)
    d[np.arange(logits.shape[0]), labels] -= 1.0
    if node.attrs["reduction"] == "mean":
        d /= logits.shape[0]
    return d * g, None


_OPS: dict[str, tuple[Callable, Callable]] = {
    "identity": (_fwd_identity, _bwd_identity),
    "add": (_fwd_add, _bwd_add),
    "scale": (_fwd_scale, _bwd_scale),
    "matmul": (_fwd_matmul, _bwd_matmul),
    "dense": (_fwd_dense, _bwd_dense),
    "conv2d": (_fwd_conv2d, _bwd_conv2d),
    "relu": (_fwd_relu, _bwd_relu),
    "maxpool2": (_fwd_maxpool2, _bwd_maxpool2),
    "reshape": (_fwd_reshape, _bwd_reshape),
    "batchnorm": (_fwd_batchnorm, _bwd_batchnorm),
    "softmax_xent": (_fwd_softmax_xent, _bwd_softmax_xent),
}


class Graph:
    """Static computation graph; build once, evaluate many times.

    Builder methods return integer node ids. A graph instance caches the
    activations of its last forward pass, so one instance must not be
    evaluated from two threads at once; build one graph per thread instead.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.outputs: dict[str, int] = {}
        self._leaf_ids: dict[str, int] = {}
        self._values: list | None = None
        self._saved: list | None = None
        self._bound: dict[str, Tensor] = {}
        self.batch_stats: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    # ---- construction -----------------------------------------------------

    def _add(self, op: str, inputs: tuple[int, ...] = (), name: str | None = None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: input node {i} does not exist yet")
        node = Node(len(self.nodes), op, tuple(inputs), name, attrs)
        self.nodes.append(node)
        return node.id

    def _leaf(self, op: str, name: str) -> int:
        if name in self._leaf_ids:
            raise GraphError(f"leaf {name!r} declared twice")
        nid = self._add(op, (), name)
        self._leaf_ids[name] = nid
        return nid

    def input(self, name: str) -> int:
        return self._leaf("input", name)

    def param(self, name: str) -> int:
        return self._leaf("param", name)

    def labels(self, name: str) -> int:
        return self._leaf("labels", name)

    def identity(self, x: int) -> int:
        return self._add("identity", (x,))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def scale(self, x: int, factor: float) -> int:
        return self._add("scale", (x,), factor=float(factor))

    def matmul(self, a: int, b: int) -> int:
        return self._add("matmul", (a, b))

    def dense(self, x: int, w: int, b: int) -> int:
        return self._add("dense", (x, w, b))

    def conv2d(self, x: int, w: int, b: int, padding: str = "same") -> int:
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        return self._add("conv2d", (x, w, b), padding=padding)

    def relu(self, x: int) -> int:
        return self._add("relu", (x,))

    def maxpool2(self, x: int) -> int:
        return self._add("maxpool2", (x,))

    def flatten(self, x: int, size: int) -> int:
        return self._add("reshape", (x,), shape=(size,))

    def batchnorm(self, x: int, gamma: int, beta: int, key: str) -> int:
        return self._add("batchnorm", (x, gamma, beta), key=key)

    def softmax_xent(self, logits: int, labels: int, reduction: str = "mean") -> int:
        if reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
        return self._add("softmax_xent", (logits, labels), reduction=reduction)

    def output(self, name: str, node_id: int) -> None:
        self.outputs[name] = node_id

    @property
    def leaf_names(self) -> list[str]:
        return list(self._leaf_ids)

    # ---- evaluation -------------------------------------------------------

    def forward(self, bindings: Mapping[str, object], bn: Mapping[str, BatchNormMode] | None = None) -> dict[str, Tensor]:
        values: list = [None] * len(self.nodes)
        saved: list = [None] * len(self.nodes)
        bound: dict[str, Tensor] = {}
        self.batch_stats = {}
        ctx = {"bn": bn, "batch_stats": self.batch_stats}
        for node in self.nodes:
            if node.op in LEAF_OPS:
                if node.name not in bindings:
                    raise GraphError(f"unbound input {node.name!r} (node {node.id})")
                val = bindings[node.name]
                if node.op == "labels":
                    values[node.id] = np.asarray(val, dtype=np.intp)
                else:
                    if not isinstance(val, Tensor):
                        val = Tensor(val)
                    bound[node.name] = val
                    values[node.id] = val.values
                continue
            fwd, _ = _OPS[node.op]
            values[node.id], saved[node.id] = fwd(node, [values[i] for i in node.inputs], ctx)
        self._values, self._saved, self._bound = values, saved, bound
        return {name: Tensor(values[nid]) for name, nid in self.outputs.items()}

    def value(self, node_id: int) -> np.ndarray:
        if self._values is None:
            raise GraphError("forward has not run on this graph")
        return self._values[node_id]

    def backward(self, loss_node: int | str, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Backpropagate from a scalar node into the bound leaves.

        By default every bound leaf (parameters and data inputs) receives a
        gradient; ``wrt`` restricts that set and lets ops skip work that only
        feeds unrequested leaves. Gradients accumulate into each bound
        ``Tensor.grad`` (call ``zero_grad`` between passes to avoid that); the
        returned mapping holds the accumulated buffers keyed by leaf name.
        """
        if self._values is None:
            raise GraphError("backward called before forward")
        if isinstance(loss_node, str):
            loss_node = self.outputs[loss_node]
        loss = self._values[loss_node]
        if np.ndim(loss) != 0:
            raise GraphError(f"loss node {loss_node} is not scalar (shape {np.shape(loss)})")
        targets = set(self._bound) if wrt is None else set(wrt)
        unknown = targets - set(self._bound)
        if unknown:
            raise GraphError(f"cannot differentiate with respect to unbound leaves {sorted(unknown)}")
        requires = [False] * len(self.nodes)
        for node in self.nodes:
            if node.op in LEAF_OPS:
                requires[node.id] = node.name in targets
            else:
                requires[node.id] = any(requires[i] for i in node.inputs)
        grads: list = [None] * len(self.nodes)
        grads[loss_node] = np.ones(())
        for node in reversed(self.nodes[: loss_node + 1]):
            g = grads[node.id]
            if g is None or node.op in LEAF_OPS or not requires[node.id]:
                continue
            _, bwd = _OPS[node.op]
            args = [self._values[i] for i in node.inputs]
            needs = tuple(requires[i] for i in node.inputs)
            for i, gi in zip(node.inputs, bwd(node, g, args, self._values[node.id], self._saved[node.id], needs)):
                if gi is None or not requires[i]:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        out: dict[str, np.ndarray] = {}
        for name, tensor in self._bound.items():
            if name not in targets:
                continue
            g = grads[self._leaf_ids[name]]
            if g is None:
                g = np.zeros_like(tensor.values)
            g = np.broadcast_to(g, tensor.shape)
            tensor.grad = np.array(g, dtype=np.float64) if tensor.grad is None else tensor.grad + g
            out[name] = tensor.grad
        return out

    def zero_grad(self) -> None:
        for tensor in self._bound.values():
            tensor.zero_grad()


def forward(graph: Graph, bindings: Mapping[str, object], bn: Mapping[str, BatchNormMode] | None = None) -> dict[str, Tensor]:
    return graph.forward(bindings, bn)


def backward(graph: Graph, loss_node: int | str, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    return graph.backward(loss_node, wrt)


def finite_diff_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    h: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central differences.

    ``f`` maps a point to ``(value, analytic_gradient)``. Returns
    ``max_j |analytic_j - numeric_j| / max(1, |numeric_j|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    value, analytic = f(x.copy())
    analytic = np.broadcast_to(np.asarray(analytic, dtype=np.float64), x.shape)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise FloatingPointError("non-finite value or gradient at the base point")
    flat = x.reshape(-1)
    worst = 0.0
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(x.copy())[0]
        flat[j] = orig - h
        fm = f(x.copy())[0]
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {j}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def graph_function(graph: Graph, wrt: str, loss: int | str, bindings: Mapping[str, object], bn=None):
    """Wrap a graph as ``x -> (loss, d loss / d wrt)`` for :func:`finite_diff_check`."""

    def f(x: np.ndarray):
        b = dict(bindings)
        for k, v in b.items():
            if isinstance(v, Tensor):
                b[k] = Tensor(v.values)
        b[wrt] = Tensor(x)
        graph.forward(b, bn)
        grads = graph.backward(loss)
        return float(graph.value(graph.outputs[loss] if isinstance(loss, str) else loss)), grads[wrt]

    return f
