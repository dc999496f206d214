"""
Layer descriptions and their forward/backward kernels.

Activations are NHWC. Conv weights are filter-major `(F, k, k, C_in)`, so the row-major
flattening of `w[f]` is filter f's H×W×C vector. Convolutions are valid (no padding), stride 1.
"""

import math
from dataclasses import dataclass
from typing import Literal

import dataclasses_json
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tascforge.errors import ArchitectureInfeasible, ShapeMismatch
from tascforge.space import Activation
from tascforge.tensor import Tensor

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717
ELU_ALPHA = 1.0
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9

type Shape = tuple[int, ...]


@dataclasses_json.dataclass_json
@dataclass
class ConvSpec:
    k: int
    filters: int
    activation: Activation
    has_batchnorm: bool = False
    trainable: bool = True
    kind: Literal["conv"] = "conv"


@dataclasses_json.dataclass_json
@dataclass
class MaxPoolSpec:
    k: int
    stride: int = 1
    kind: Literal["maxpool"] = "maxpool"


@dataclasses_json.dataclass_json
@dataclass
class DenseSpec:
    neurons: int
    activation: Activation
    has_batchnorm: bool = False
    trainable: bool = True
    kind: Literal["dense"] = "dense"


@dataclasses_json.dataclass_json
@dataclass
class DropoutSpec:
    p: float
    kind: Literal["dropout"] = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.p}")


@dataclasses_json.dataclass_json
@dataclass
class FlattenSpec:
    kind: Literal["flatten"] = "flatten"


@dataclasses_json.dataclass_json
@dataclass
class OutputSpec:
    classes: int
    trainable: bool = True
    kind: Literal["output"] = "output"


type LayerSpec = ConvSpec | MaxPoolSpec | DenseSpec | DropoutSpec | FlattenSpec | OutputSpec

LAYER_TYPES: dict[str, type] = {
    "conv": ConvSpec,
    "maxpool": MaxPoolSpec,
    "dense": DenseSpec,
    "dropout": DropoutSpec,
    "flatten": FlattenSpec,
    "output": OutputSpec,
}


def layer_from_dict(raw: dict) -> LayerSpec:
    return LAYER_TYPES[raw["kind"]].from_dict(raw)


def has_params(layer: LayerSpec) -> bool:
    return isinstance(layer, ConvSpec | DenseSpec | OutputSpec)


def output_shape(layer: LayerSpec, input_shape: Shape) -> Shape:
    """Shape of one sample after `layer`, or ArchitectureInfeasible when the map would vanish."""
    match layer:
        case ConvSpec(k=k, filters=filters):
            if len(input_shape) != 3:  # noqa: PLR2004
                raise ArchitectureInfeasible(f"conv layer needs a spatial input, got {input_shape}")
            h, w, _ = input_shape
            if h < k or w < k:
                raise ArchitectureInfeasible(f"{k}x{k} conv on a {h}x{w} map leaves nothing")
            return (h - k + 1, w - k + 1, filters)
        case MaxPoolSpec(k=k, stride=stride):
            if len(input_shape) != 3:  # noqa: PLR2004
                raise ArchitectureInfeasible(f"pooling needs a spatial input, got {input_shape}")
            h, w, c = input_shape
            if h < k or w < k:
                raise ArchitectureInfeasible(f"{k}x{k} pooling on a {h}x{w} map leaves nothing")
            return ((h - k) // stride + 1, (w - k) // stride + 1, c)
        case DenseSpec(neurons=neurons):
            if len(input_shape) != 1:
                raise ArchitectureInfeasible(f"dense layer needs a flat input, got {input_shape}")
            return (neurons,)
        case OutputSpec(classes=classes):
            if len(input_shape) != 1:
                raise ArchitectureInfeasible(f"output layer needs a flat input, got {input_shape}")
            return (classes,)
        case DropoutSpec():
            return input_shape
        case FlattenSpec():
            return (math.prod(input_shape),)
    raise TypeError(f"unknown layer {layer!r}")


# activations


def activate(kind: Activation, z: Tensor) -> Tensor:
    match kind:
        case Activation.SIGMOID:
            return 0.5 * (1.0 + np.tanh(0.5 * z))
        case Activation.TANH:
            return np.tanh(z)
        case Activation.RELU:
            return np.maximum(z, 0.0)
        case Activation.ELU:
            return np.where(z > 0, z, ELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
        case Activation.SELU:
            return SELU_LAMBDA * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: Activation, z: Tensor, a: Tensor) -> Tensor:
    """da/dz given the pre-activation z and the activation a."""
    match kind:
        case Activation.SIGMOID:
            return a * (1.0 - a)
        case Activation.TANH:
            return 1.0 - a * a
        case Activation.RELU:
            return (z > 0).astype(np.float64)
        case Activation.ELU:
            return np.where(z > 0, 1.0, a + ELU_ALPHA)
        case Activation.SELU:
            return np.where(z > 0, SELU_LAMBDA, a + SELU_LAMBDA * SELU_ALPHA)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


# convolution


def _windows(x: Tensor, k: int) -> Tensor:
    """(N, Ho, Wo, k, k, C) view of every k×k patch."""
    return sliding_window_view(x, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)


def conv_forward(x: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Returns the output and the im2col matrix needed by the backward pass."""
    n, h, width, c = x.shape
    f, k, _, c_in = w.shape
    if c != c_in:
        raise ShapeMismatch(f"conv expects {c_in} input channels, got {c}")
    ho, wo = h - k + 1, width - k + 1
    cols = _windows(x, k).reshape(n * ho * wo, k * k * c)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, ho, wo, f), cols


def conv_backward(dout: Tensor, cols: Tensor, x_shape: Shape, w: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    n, h, width, c = x_shape
    f, k, _, _ = w.shape
    ho, wo = dout.shape[1], dout.shape[2]
    dout_flat = dout.reshape(-1, f)

    dw = (dout_flat.T @ cols).reshape(w.shape)
    db = dout_flat.sum(axis=0)

    dcols = (dout_flat @ w.reshape(f, -1)).reshape(n, ho, wo, k, k, c)
    dx = np.zeros((n, h, width, c))
    for i in range(k):
        for j in range(k):
            dx[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
    return dx, dw, db


# pooling


def maxpool_forward(x: Tensor, k: int, stride: int) -> tuple[Tensor, Tensor]:
    windows = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = windows.shape[:4]
    flat = windows.reshape(n, ho, wo, c, k * k)
    argmax = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(dout: Tensor, argmax: Tensor, x_shape: Shape, k: int, stride: int) -> Tensor:
    dx = np.zeros(x_shape)
    ho, wo = dout.shape[1], dout.shape[2]
    for i in range(k):
        for j in range(k):
            mask = argmax == i * k + j
            dx[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dout * mask
    return dx


# batch normalization over every axis but the last


def batchnorm_forward(
    z: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    *,
    train_mode: bool,
) -> tuple[Tensor, dict | None]:
    axes = tuple(range(z.ndim - 1))
    if not train_mode:
        z_hat = (z - running_mean) / np.sqrt(running_var + BN_EPSILON)
        return gamma * z_hat + beta, None

    mean = z.mean(axis=axes)
    var = z.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
    z_hat = (z - mean) * inv_std

    running_mean *= BN_MOMENTUM
    running_mean += (1.0 - BN_MOMENTUM) * mean
    running_var *= BN_MOMENTUM
    running_var += (1.0 - BN_MOMENTUM) * var

    return gamma * z_hat + beta, {"z_hat": z_hat, "inv_std": inv_std}


def batchnorm_backward(dout: Tensor, cache: dict, gamma: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    axes = tuple(range(dout.ndim - 1))
    m = math.prod(dout.shape[:-1])
    z_hat, inv_std = cache["z_hat"], cache["inv_std"]

    dgamma = np.sum(dout * z_hat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    dz_hat = dout * gamma
    dz = (inv_std / m) * (m * dz_hat - dz_hat.sum(axis=axes) - z_hat * np.sum(dz_hat * z_hat, axis=axes))
    return dz, dgamma, dbeta


# dropout


def dropout_forward(x: Tensor, p: float, rng: np.random.Generator, *, train_mode: bool) -> tuple[Tensor, Tensor | None]:
    """Inverted dropout: kept units are scaled by 1/(1-p) so eval mode is the identity."""
    if not train_mode or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask
