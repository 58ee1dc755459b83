"""Small classifiers with split batch normalization.

Every batch-norm layer keeps two sets of running statistics: ``main`` for
clean batches and ``aux`` for adversarial ones. The scale/shift parameters
(``<layer>.gamma`` / ``<layer>.beta``) are ordinary trainable tensors in
:class:`ModelParams` and are shared by both branches.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNormMode, Graph, Tensor


class Branch(str, enum.Enum):
    MAIN = "main"
    AUX = "aux"


class Phase(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class DualBatchNormState:
    main_mean: np.ndarray
    main_var: np.ndarray
    aux_mean: np.ndarray
    aux_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> DualBatchNormState:
        return cls(np.zeros(channels), np.ones(channels), np.zeros(channels), np.ones(channels), momentum, eps)

    def stats(self, branch: Branch) -> tuple[np.ndarray, np.ndarray]:
        if Branch(branch) is Branch.MAIN:
            return self.main_mean, self.main_var
        return self.aux_mean, self.aux_var

    def update(self, branch: Branch, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        mean, var = self.stats(branch)
        new_mean = m * mean + (1.0 - m) * batch_mean
        new_var = m * var + (1.0 - m) * batch_var
        if Branch(branch) is Branch.MAIN:
            self.main_mean, self.main_var = new_mean, new_var
        else:
            self.aux_mean, self.aux_var = new_mean, new_var


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str  # dense | conv | bn
    fan_in: int
    fan_out: int


@dataclass(frozen=True)
class Architecture:
    """Layer layout of a preset. ``input_shape`` excludes the batch axis."""

    kind: str  # mlp | cnn
    input_shape: tuple[int, ...]
    num_classes: int
    widths: tuple[int, ...]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))


PRESETS = {
    "mlp": (256, 128),
    "cnn": (16, 32),
}


def make_architecture(preset: str, input_shape, num_classes: int, widths=None) -> Architecture:
    kind = preset.split("-")[0]
    if kind not in PRESETS:
        raise ValueError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
    input_shape = tuple(int(s) for s in input_shape)
    if kind == "cnn" and len(input_shape) != 3:
        raise ValueError(f"cnn preset needs (H, W, C) inputs, got {input_shape}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    return Architecture(kind, input_shape, int(num_classes), tuple(widths or PRESETS[kind]))


def _layer_infos(arch: Architecture) -> list[LayerInfo]:
    layers = []
    if arch.kind == "mlp":
        prev = arch.input_size
        for i, width in enumerate(arch.widths, start=1):
            layers.append(LayerInfo(f"fc{i}", "dense", prev, width))
            layers.append(LayerInfo(f"bn{i}", "bn", width, width))
            prev = width
        layers.append(LayerInfo("out", "dense", prev, arch.num_classes))
    else:
        h, w, c = arch.input_shape
        prev = c
        for i, ch in enumerate(arch.widths, start=1):
            layers.append(LayerInfo(f"conv{i}", "conv", 9 * prev, ch))
            layers.append(LayerInfo(f"bn{i}", "bn", ch, ch))
            prev = ch
            h, w = h // 2, w // 2
        layers.append(LayerInfo("out", "dense", h * w * prev, arch.num_classes))
    return layers


@dataclass
class ModelParams:
    """Trainable tensors, split-BN running statistics and layer metadata.

    ``roles`` tags each tensor as ``weight``, ``bias``, ``bn_scale`` or
    ``bn_shift``; the optimizer uses it to exempt biases and BN parameters
    from layer-wise scaling and weight decay.
    """

    arch: Architecture
    tensors: dict[str, np.ndarray]
    roles: dict[str, str]
    bn: dict[str, DualBatchNormState]
    layers: tuple[LayerInfo, ...] = field(default=())

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def copy(self) -> ModelParams:
        return ModelParams(
            self.arch,
            {k: np.array(v) for k, v in self.tensors.items()},
            dict(self.roles),
            copy.deepcopy(self.bn),
            self.layers,
        )

    def snapshot(self) -> ModelParams:
        """Deep copy whose arrays are read-only; safe to share across threads."""
        snap = self.copy()
        for arr in snap.tensors.values():
            arr.flags.writeable = False
        for state in snap.bn.values():
            for name in ("main_mean", "main_var", "aux_mean", "aux_var"):
                getattr(state, name).flags.writeable = False
        return snap

    def bn_copy(self) -> dict[str, DualBatchNormState]:
        return copy.deepcopy(self.bn)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(arch: Architecture, seed: int, bn_momentum: float = 0.9, bn_eps: float = 1e-5) -> ModelParams:
    """He-normal fan-in initialization; zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    roles: dict[str, str] = {}
    bn: dict[str, DualBatchNormState] = {}
    layers = _layer_infos(arch)
    for layer in layers:
        if layer.kind == "bn":
            tensors[f"{layer.name}.gamma"] = np.ones(layer.fan_out)
            tensors[f"{layer.name}.beta"] = np.zeros(layer.fan_out)
            roles[f"{layer.name}.gamma"] = "bn_scale"
            roles[f"{layer.name}.beta"] = "bn_shift"
            bn[layer.name] = DualBatchNormState.fresh(layer.fan_out, bn_momentum, bn_eps)
            continue
        std = np.sqrt(2.0 / layer.fan_in)
        if layer.kind == "conv":
            cin = layer.fan_in // 9
            w = rng.normal(0.0, std, size=(3, 3, cin, layer.fan_out))
        else:
            w = rng.normal(0.0, std, size=(layer.fan_in, layer.fan_out))
        tensors[f"{layer.name}.w"] = w
        tensors[f"{layer.name}.b"] = np.zeros(layer.fan_out)
        roles[f"{layer.name}.w"] = "weight"
        roles[f"{layer.name}.b"] = "bias"
    return ModelParams(arch, tensors, roles, bn, tuple(layers))


def build_graph(arch: Architecture, reduction: str = "mean") -> Graph:
    """Graph with leaves ``x``, ``y`` and every parameter; outputs ``logits`` and ``loss``."""
    g = Graph()
    x = g.input("x")
    y = g.labels("y")
    params = {}
    for layer in _layer_infos(arch):
        if layer.kind == "bn":
            params[layer.name] = (g.param(f"{layer.name}.gamma"), g.param(f"{layer.name}.beta"))
        else:
            params[layer.name] = (g.param(f"{layer.name}.w"), g.param(f"{layer.name}.b"))
    h = x
    if arch.kind == "mlp":
        if len(arch.input_shape) != 1:
            h = g.flatten(h, arch.input_size)
        for i in range(1, len(arch.widths) + 1):
            h = g.dense(h, *params[f"fc{i}"])
            h = g.batchnorm(h, *params[f"bn{i}"], key=f"bn{i}")
            h = g.relu(h)
        logits = g.dense(h, *params["out"])
    else:
        hh, ww, _ = arch.input_shape
        for i in range(1, len(arch.widths) + 1):
            h = g.conv2d(h, *params[f"conv{i}"], padding="same")
            h = g.batchnorm(h, *params[f"bn{i}"], key=f"bn{i}")
            h = g.relu(h)
            h = g.maxpool2(h)
            hh, ww = hh // 2, ww // 2
        h = g.flatten(h, hh * ww * arch.widths[-1])
        logits = g.dense(h, *params["out"])
    g.output("logits", logits)
    g.output("loss", g.softmax_xent(logits, y, reduction=reduction))
    return g


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray | None = None  # dataset row ids, for access tracing

    def __post_init__(self) -> None:
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"batch has {self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]


def _bn_modes(params: ModelParams, branch: Branch, phase: Phase) -> dict[str, BatchNormMode]:
    train = Phase(phase) is Phase.TRAIN
    modes = {}
    for name, state in params.bn.items():
        mean, var = state.stats(branch)
        modes[name] = BatchNormMode(mean, var, train, state.eps)
    return modes


def _check_batch(params: ModelParams, batch: LabeledBatch, phase: Phase) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if Phase(phase) is Phase.TRAIN and len(batch) < 2:
        raise ValueError("train-phase batch needs at least 2 examples for batch statistics")
    if batch.labels.min() < 0 or batch.labels.max() >= params.num_classes:
        raise ValueError(f"label out of range [0, {params.num_classes})")
    if batch.inputs.shape[1:] != params.arch.input_shape:
        raise ValueError(f"input shape {batch.inputs.shape[1:]} != model input {params.arch.input_shape}")


@dataclass
class Evaluation:
    loss: float
    logits: np.ndarray
    param_grads: dict[str, np.ndarray] | None
    input_grad: np.ndarray | None


def evaluate(
    params: ModelParams,
    batch: LabeledBatch,
    branch: Branch,
    phase: Phase,
    *,
    reduction: str = "mean",
    grads: bool = True,
    wrt: str = "all",
) -> Evaluation:
    """One forward (and optionally backward) pass on a fresh graph.

    In the train phase the selected branch's running statistics are updated
    from the batch statistics; nothing else in ``params`` is touched.
    ``wrt`` picks the gradients computed: ``all``, ``params`` or ``input``.
    """
    _check_batch(params, batch, phase)
    g = build_graph(params.arch, reduction)
    bindings: dict[str, object] = {name: Tensor(arr) for name, arr in params.tensors.items()}
    bindings["x"] = Tensor(batch.inputs)
    bindings["y"] = batch.labels
    out = g.forward(bindings, _bn_modes(params, branch, phase))
    if Phase(phase) is Phase.TRAIN:
        for name, (mean, var, _) in g.batch_stats.items():
            params.bn[name].update(branch, mean, var)
    loss = float(out["loss"].values)
    if not grads:
        return Evaluation(loss, out["logits"].values, None, None)
    if wrt == "params":
        targets = list(params.tensors)
    elif wrt == "input":
        targets = ["x"]
    else:
        targets = None
    all_grads = g.backward("loss", targets)
    input_grad = all_grads.pop("x", None)
    return Evaluation(loss, out["logits"].values, all_grads or None, input_grad)


def model_forward(params: ModelParams, batch: LabeledBatch, bn_branch: Branch, phase: Phase) -> Tensor:
    return Tensor(evaluate(params, batch, bn_branch, phase, grads=False).logits)


def half_loss_and_grads(
    params: ModelParams, batch: LabeledBatch, branch: Branch, phase: Phase = Phase.TRAIN
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy of one batch through one BN branch, with parameter gradients."""
    ev = evaluate(params, batch, branch, phase, wrt="params")
    return ev.loss, ev.param_grads


def combine_halves(clean: tuple[float, dict], adv: tuple[float, dict]) -> tuple[float, dict[str, np.ndarray]]:
    (lc, gc), (la, ga) = clean, adv
    return 0.5 * (lc + la), {k: 0.5 * (gc[k] + ga[k]) for k in gc}


def loss_and_grads(
    params: ModelParams, clean_batch: LabeledBatch, adv_batch: LabeledBatch
) -> tuple[float, dict[str, np.ndarray]]:
    """Half-and-half clean/adversarial loss and its parameter gradients.

    Clean examples go through the main BN branch, adversarial ones through
    the auxiliary branch, both in the train phase.
    """
    if len(clean_batch) != len(adv_batch):
        raise ValueError(f"clean batch has {len(clean_batch)} examples, adversarial batch {len(adv_batch)}")
    clean = half_loss_and_grads(params, clean_batch, Branch.MAIN)
    adv = half_loss_and_grads(params, adv_batch, Branch.AUX)
    return combine_halves(clean, adv)


def input_gradient(
    params: ModelParams, batch: LabeledBatch, branch: Branch = Branch.AUX, phase: Phase = Phase.EVAL
) -> np.ndarray:
    """Per-example input gradients of the cross-entropy (summed over the batch).

    With eval-phase BN, examples do not interact, so row i is exactly the
    gradient of example i's own loss.
    """
    return evaluate(params, batch, branch, phase, reduction="sum", wrt="input").input_grad


def predict(params: ModelParams, inputs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    preds = []
    for start in range(0, inputs.shape[0], chunk):
        x = inputs[start:start + chunk]
        batch = LabeledBatch(x, np.zeros(x.shape[0], dtype=np.intp))
        logits = model_forward(params, batch, Branch.MAIN, Phase.EVAL).values
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)


def accuracy(params: ModelParams, inputs: np.ndarray, labels: np.ndarray, chunk: int = 2048) -> float:
    """Clean accuracy with the main BN branch in eval mode."""
    if inputs.shape[0] == 0:
        return float("nan")
    return float(np.mean(predict(params, inputs, chunk) == labels))
