"""Exact parameter and FLOP counts. One multiply-accumulate counts as two FLOPs."""

from tascforge.nn.layers import ConvSpec, DenseSpec, LayerSpec, OutputSpec, Shape
from tascforge.nn.network import NetworkSpec


def layer_params(layer: LayerSpec, input_shape: Shape) -> tuple[int, int]:
    """(total, trainable) parameters of one layer."""
    match layer:
        case ConvSpec(k=k, filters=filters, has_batchnorm=bn, trainable=trainable):
            weights = k * k * input_shape[-1] * filters + filters
            total = weights + (4 * filters if bn else 0)
            learnable = weights + (2 * filters if bn else 0)
        case DenseSpec(neurons=n_out, has_batchnorm=bn, trainable=trainable):
            weights = input_shape[0] * n_out + n_out
            total = weights + (4 * n_out if bn else 0)
            learnable = weights + (2 * n_out if bn else 0)
        case OutputSpec(classes=n_out, trainable=trainable):
            total = learnable = input_shape[0] * n_out + n_out
        case _:
            return 0, 0
    return total, learnable if trainable else 0


def layer_flops(layer: LayerSpec, input_shape: Shape, out_shape: Shape) -> int:
    match layer:
        case ConvSpec(k=k, filters=filters):
            return 2 * k * k * input_shape[-1] * filters * out_shape[0] * out_shape[1]
        case DenseSpec(neurons=n_out) | OutputSpec(classes=n_out):
            return 2 * input_shape[0] * n_out
    return 0


def count_params(spec: NetworkSpec) -> tuple[int, int]:
    shapes = spec.shapes()
    total = trainable = 0
    for layer, in_shape in zip(spec.layers, shapes[:-1], strict=True):
        t, learnable = layer_params(layer, in_shape)
        total += t
        trainable += learnable
    return total, trainable


def count_flops(spec: NetworkSpec, layers: list[int] | None = None) -> int:
    """
    Forward-pass FLOPs of conv, dense and output layers.

    :param layers: Restrict the sum to these layer indices.
    """
    shapes = spec.shapes()
    selected = range(len(spec.layers)) if layers is None else layers
    return sum(layer_flops(spec.layers[i], shapes[i], shapes[i + 1]) for i in selected)
