"""
Network graphs, their trainable state, and the forward/backward passes over them.

Layers run in list order. A residual group is a set of conv layers with identical output
shapes; the outputs of all members are added onto the output of the highest-index member.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from loguru import logger

from tascforge.errors import ArchitectureInfeasible, NonFiniteLoss, ShapeMismatch
from tascforge.nn.layers import (
    BN_EPSILON,
    ConvSpec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    LayerSpec,
    MaxPoolSpec,
    OutputSpec,
    Shape,
    activate,
    activate_grad,
    batchnorm_backward,
    batchnorm_forward,
    conv_backward,
    conv_forward,
    dropout_forward,
    has_params,
    layer_from_dict,
    maxpool_backward,
    maxpool_forward,
    output_shape,
    softmax,
)
from tascforge.nn.losses import (
    ClassWeights,
    FilterPair,
    similarity_regularizer,
    weighted_cross_entropy,
    weighted_cross_entropy_grad,
)
from tascforge.tensor import Tensor

ADAGRAD_EPSILON = 1e-8

type Params = dict[str, Tensor]


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: Shape
    residual_groups: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.residual_groups = [sorted(g) for g in self.residual_groups]
        self.validate()

    def validate(self):
        shapes = self.shapes()

        seen: set[int] = set()
        for group in self.residual_groups:
            if len(group) < 2 or len(set(group)) != len(group):  # noqa: PLR2004
                raise ArchitectureInfeasible(f"residual group {group} needs at least two distinct layers")
            for index in group:
                if not 0 <= index < len(self.layers) or not isinstance(self.layers[index], ConvSpec):
                    raise ArchitectureInfeasible(f"residual group member {index} is not a conv layer")
                if index in seen:
                    raise ArchitectureInfeasible(f"layer {index} belongs to more than one residual group")
                seen.add(index)
            if len({shapes[i + 1] for i in group}) != 1:
                raise ArchitectureInfeasible(f"residual group {group} members have different output shapes")

    def shapes(self) -> list[Shape]:
        """Per-sample shapes: index 0 is the input, index i+1 the output of layer i."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(output_shape(layer, shapes[-1]))
        return shapes

    @property
    def output_shape(self) -> Shape:
        return self.shapes()[-1]

    def merges(self) -> dict[int, list[int]]:
        """merge point -> the other members whose outputs are added there."""
        return {group[-1]: group[:-1] for group in self.residual_groups}

    def group_of(self, index: int) -> list[int] | None:
        return next((g for g in self.residual_groups if index in g), None)

    def conv_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, ConvSpec)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "residual_groups": [list(g) for g in self.residual_groups],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NetworkSpec":
        return cls(
            [layer_from_dict(raw) for raw in data["layers"]],
            tuple(data["input_shape"]),
            [list(g) for g in data.get("residual_groups", [])],
        )


@dataclass
class ModelState:
    params: list[Params]
    buffers: list[Params]
    accumulators: list[Params]
    rng: np.random.Generator

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


def init_model(spec: NetworkSpec, seed: int) -> ModelState:
    """He-scaled normal weights, zero biases, identity batch-norm; fully determined by `seed`."""
    init_rng, dropout_rng = np.random.default_rng(seed).spawn(2)
    shapes = spec.shapes()

    params: list[Params] = []
    buffers: list[Params] = []
    for layer, in_shape in zip(spec.layers, shapes[:-1], strict=True):
        p: Params = {}
        b: Params = {}
        match layer:
            case ConvSpec(k=k, filters=filters, has_batchnorm=bn):
                fan_in = k * k * in_shape[-1]
                p["w"] = init_rng.normal(0.0, math.sqrt(2.0 / fan_in), (filters, k, k, in_shape[-1]))
                p["b"] = np.zeros(filters)
                if bn:
                    p["gamma"], p["beta"] = np.ones(filters), np.zeros(filters)
                    b["running_mean"], b["running_var"] = np.zeros(filters), np.ones(filters)
            case DenseSpec(neurons=n_out, has_batchnorm=bn):
                p["w"] = init_rng.normal(0.0, math.sqrt(2.0 / in_shape[0]), (in_shape[0], n_out))
                p["b"] = np.zeros(n_out)
                if bn:
                    p["gamma"], p["beta"] = np.ones(n_out), np.zeros(n_out)
                    b["running_mean"], b["running_var"] = np.zeros(n_out), np.ones(n_out)
            case OutputSpec(classes=n_out):
                p["w"] = init_rng.normal(0.0, math.sqrt(2.0 / in_shape[0]), (in_shape[0], n_out))
                p["b"] = np.zeros(n_out)
        params.append(p)
        buffers.append(b)

    accumulators = [{name: np.zeros_like(v) for name, v in p.items()} for p in params]
    return ModelState(params, buffers, accumulators, dropout_rng)


def _affine_forward(layer: ConvSpec | DenseSpec, p: Params, buf: Params, x: Tensor, *, train_mode: bool):
    cache: dict[str, Any] = {"x_shape": x.shape}
    if isinstance(layer, ConvSpec):
        z, cache["cols"] = conv_forward(x, p["w"], p["b"])
    else:
        z = x @ p["w"] + p["b"]
        cache["x"] = x

    if layer.has_batchnorm:
        z, cache["bn"] = batchnorm_forward(
            z, p["gamma"], p["beta"], buf["running_mean"], buf["running_var"], train_mode=train_mode
        )

    a = activate(layer.activation, z)
    cache["z"], cache["a"] = z, a
    return a, cache


def _affine_backward(
    layer: ConvSpec | DenseSpec, p: Params, buf: Params, cache: dict, da: Tensor
) -> tuple[Tensor, Params]:
    dz = da * activate_grad(layer.activation, cache["z"], cache["a"])
    grads: Params = {}
    if layer.has_batchnorm and cache["bn"] is None:
        # inference-mode batch-norm is a fixed affine map
        dz = dz * p["gamma"] / np.sqrt(buf["running_var"] + BN_EPSILON)
    elif layer.has_batchnorm:
        dz, grads["gamma"], grads["beta"] = batchnorm_backward(dz, cache["bn"], p["gamma"])

    if isinstance(layer, ConvSpec):
        dx, grads["w"], grads["b"] = conv_backward(dz, cache["cols"], cache["x_shape"], p["w"])
    else:
        grads["w"] = cache["x"].T @ dz
        grads["b"] = dz.sum(axis=0)
        dx = dz @ p["w"].T
    return dx, grads


def _run(model: ModelState, spec: NetworkSpec, x: Tensor, *, train_mode: bool, keep_cache: bool):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"batch has sample shape {x.shape[1:]}, network expects {spec.input_shape}")

    merges = spec.merges()
    sources = {j for members in merges.values() for j in members}
    stop = first_trainable_layer(spec)
    outputs: dict[int, Tensor] = {}
    caches: list[dict[str, Any]] = []

    h = x
    for i, layer in enumerate(spec.layers):
        p, buf = model.params[i], model.buffers[i]
        # frozen layers always run in inference mode
        layer_train = train_mode and i >= stop and getattr(layer, "trainable", True)
        cache: dict[str, Any] = {}
        match layer:
            case ConvSpec() | DenseSpec():
                h, cache = _affine_forward(layer, p, buf, h, train_mode=layer_train)
            case MaxPoolSpec(k=k, stride=stride):
                cache["x_shape"] = h.shape
                h, cache["argmax"] = maxpool_forward(h, k, stride)
            case DropoutSpec(p=rate):
                h, cache["mask"] = dropout_forward(h, rate, model.rng, train_mode=layer_train)
            case FlattenSpec():
                cache["x_shape"] = h.shape
                h = h.reshape(h.shape[0], -1)
            case OutputSpec():
                cache["x"] = h
                h = softmax(h @ p["w"] + p["b"])

        if i in sources:
            outputs[i] = h
        if i in merges:
            h = h + sum(outputs[j] for j in merges[i])
        if keep_cache:
            caches.append(cache)

    return h, caches


def forward(model: ModelState, spec: NetworkSpec, x: Tensor, *, train_mode: bool = False) -> Tensor:
    """
    Run a batch through the network.

    :return: Class probabilities when the last layer is an Output layer, else the final activations.
    """
    return _run(model, spec, x, train_mode=train_mode, keep_cache=False)[0]


def forward_train(model: ModelState, spec: NetworkSpec, x: Tensor) -> tuple[Tensor, list[dict[str, Any]]]:
    """Train-mode forward pass that also returns the per-layer caches `backward` needs."""
    return _run(model, spec, x, train_mode=True, keep_cache=True)


def first_trainable_layer(spec: NetworkSpec) -> int:
    return next(
        (i for i, layer in enumerate(spec.layers) if has_params(layer) and layer.trainable),
        len(spec.layers),
    )


def backward(model: ModelState, spec: NetworkSpec, caches: list[dict[str, Any]], dlogits: Tensor) -> list[Params]:
    """
    Parameter gradients given dL/dlogits of the final Output layer.

    Layers below the first trainable one are skipped.
    """
    if not spec.layers or not isinstance(spec.layers[-1], OutputSpec):
        raise ShapeMismatch("backward needs a network ending in an Output layer")

    merges = spec.merges()
    stop = first_trainable_layer(spec)
    grads: list[Params] = [{} for _ in spec.layers]
    pending: dict[int, Tensor] = {}

    g = dlogits
    for i in reversed(range(stop, len(spec.layers))):
        if i in pending:
            g = g + pending.pop(i)
        for j in merges.get(i, []):
            pending[j] = pending[j] + g if j in pending else g

        layer, cache, p = spec.layers[i], caches[i], model.params[i]
        match layer:
            case OutputSpec():
                grads[i] = {"w": cache["x"].T @ g, "b": g.sum(axis=0)}
                g = g @ p["w"].T
            case ConvSpec() | DenseSpec():
                g, grads[i] = _affine_backward(layer, p, model.buffers[i], cache, g)
            case MaxPoolSpec(k=k, stride=stride):
                g = maxpool_backward(g, cache["argmax"], cache["x_shape"], k, stride)
            case DropoutSpec():
                if cache["mask"] is not None:
                    g = g * cache["mask"]
            case FlattenSpec():
                g = g.reshape(cache["x_shape"])

    return grads


def one_hot(labels: Tensor, classes: int) -> Tensor:
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class LossBreakdown:
    cross_entropy: float
    regularizer: float
    total: float


def loss_and_gradients(
    model: ModelState,
    spec: NetworkSpec,
    x: Tensor,
    labels_onehot: Tensor,
    weights: ClassWeights,
    reg_pairs: list[FilterPair] | None = None,
) -> tuple[LossBreakdown, list[Params]]:
    """The objective Σ w_k(-y_k log ŷ_k) (+ R when pairs are given) and its gradients."""
    probs, caches = forward_train(model, spec, x)
    ce = weighted_cross_entropy(probs, labels_onehot, weights)
    grads = backward(model, spec, caches, weighted_cross_entropy_grad(probs, labels_onehot, weights))

    reg = 0.0
    if reg_pairs is not None:
        layers = sorted({pair.layer for pair in reg_pairs})
        reg, reg_grads = similarity_regularizer({i: model.params[i]["w"] for i in layers}, reg_pairs)
        for i, g in reg_grads.items():
            if "w" in grads[i]:
                grads[i]["w"] = grads[i]["w"] + g

    return LossBreakdown(ce, reg, ce + reg), grads


def train_step(
    model: ModelState,
    spec: NetworkSpec,
    x: Tensor,
    labels_onehot: Tensor,
    weights: ClassWeights,
    reg_pairs: list[FilterPair] | None,
    lr: float,
) -> tuple[ModelState, LossBreakdown]:
    """One Adagrad step on a batch, in place: w <- w - lr·g / (√(G + g²) + ε)."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")

    loss, grads = loss_and_gradients(model, spec, x, labels_onehot, weights, reg_pairs)
    if not math.isfinite(loss.total):
        norms = {i: float(np.linalg.norm(p["w"])) for i, p in enumerate(model.params) if "w" in p}
        raise NonFiniteLoss(
            f"loss became {loss.total} (ce={loss.cross_entropy}, reg={loss.regularizer}); weight norms {norms}"
        )

    for i, layer in enumerate(spec.layers):
        if not has_params(layer) or not layer.trainable:
            continue
        for name, g in grads[i].items():
            acc = model.accumulators[i][name]
            acc += g * g
            model.params[i][name] -= lr * g / (np.sqrt(acc) + ADAGRAD_EPSILON)

    logger.trace(f"step loss={loss.total:.6f}")
    return model, loss
