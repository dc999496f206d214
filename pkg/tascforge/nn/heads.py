"""Building target networks out of a pretrained backbone: truncation, searched heads and composition."""

import dataclasses

import numpy as np
from loguru import logger

from tascforge.errors import ArchitectureInfeasible
from tascforge.nn.layers import (
    ConvSpec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    LayerSpec,
    MaxPoolSpec,
    OutputSpec,
    Shape,
    has_params,
)
from tascforge.nn.network import ModelState, NetworkSpec, init_model
from tascforge.space import HeadConfig


def _cut_index(spec: NetworkSpec, replace_top_k_blocks: int) -> int:
    if replace_top_k_blocks < 1:
        raise ArchitectureInfeasible(f"must replace at least one block, got {replace_top_k_blocks}")
    param_layers = [i for i, layer in enumerate(spec.layers) if has_params(layer)]
    if replace_top_k_blocks >= len(param_layers):
        raise ArchitectureInfeasible(
            f"backbone has {len(param_layers)} parameterized layers, cannot replace the top {replace_top_k_blocks}"
        )
    return param_layers[-replace_top_k_blocks]


def _freeze(layer: LayerSpec, *, trainable: bool = False) -> LayerSpec:
    return dataclasses.replace(layer, trainable=trainable) if has_params(layer) else layer


def _slice_model(model: ModelState, stop: int) -> ModelState:
    return ModelState(
        [{k: np.copy(v) for k, v in p.items()} for p in model.params[:stop]],
        [{k: np.copy(v) for k, v in b.items()} for b in model.buffers[:stop]],
        [{k: np.copy(v) for k, v in a.items()} for a in model.accumulators[:stop]],
        model.rng,
    )


def truncate_backbone(
    spec: NetworkSpec,
    model: ModelState,
    replace_top_k_blocks: int,
) -> tuple[NetworkSpec, ModelState]:
    """
    Cut off the top `replace_top_k_blocks` parameterized layers (and whatever follows them).

    Trailing flatten/dropout layers are dropped too, so a head may start with convolutions.
    The remaining layers are frozen.
    """
    cut = _cut_index(spec, replace_top_k_blocks)
    while cut > 0 and isinstance(spec.layers[cut - 1], FlattenSpec | DropoutSpec):
        cut -= 1
    if cut == 0:
        raise ArchitectureInfeasible("truncation leaves an empty backbone")

    groups = [g for g in spec.residual_groups if max(g) < cut]
    if len(groups) != len(spec.residual_groups):
        logger.debug(f"truncation at layer {cut} drops {len(spec.residual_groups) - len(groups)} residual group(s)")

    truncated = NetworkSpec([_freeze(layer) for layer in spec.layers[:cut]], spec.input_shape, groups)
    return truncated, _slice_model(model, cut)


def build_head(config: HeadConfig, feature_shape: Shape, classes: int) -> NetworkSpec:
    """
    The layers a search-space config describes, ending in a softmax output of `classes` units.

    Convs and pooling apply only to spatial features; every fc layer carries batch-norm and dropout.
    """
    layers: list[LayerSpec] = []
    spatial = len(feature_shape) == 3  # noqa: PLR2004
    if (config.convs or config.pool is not None) and not spatial:
        raise ArchitectureInfeasible(f"conv/pool slots need spatial features, backbone gives {feature_shape}")

    layers.extend(ConvSpec(c.filter_size, c.num_filters, c.activation) for c in config.convs)
    if config.pool is not None:
        layers.append(MaxPoolSpec(config.pool.filter_size, 1))
    if spatial:
        layers.append(FlattenSpec())
    for fc in config.fcs:
        layers.append(DenseSpec(fc.neurons, fc.activation, has_batchnorm=True))
        layers.append(DropoutSpec(fc.dropout))
    layers.append(OutputSpec(classes))

    # shape validation happens here and raises ArchitectureInfeasible for maps that shrink below 1x1
    return NetworkSpec(layers, feature_shape)


def compose(
    backbone_spec: NetworkSpec,
    backbone: ModelState,
    head_spec: NetworkSpec,
    head: ModelState,
) -> tuple[NetworkSpec, ModelState]:
    """One network running `head` on top of `backbone`. The head's rng drives dropout."""
    if backbone_spec.output_shape != head_spec.input_shape:
        raise ArchitectureInfeasible(
            f"head expects features of shape {head_spec.input_shape}, backbone gives {backbone_spec.output_shape}"
        )
    offset = len(backbone_spec.layers)
    spec = NetworkSpec(
        backbone_spec.layers + head_spec.layers,
        backbone_spec.input_shape,
        backbone_spec.residual_groups + [[i + offset for i in g] for g in head_spec.residual_groups],
    )
    model = ModelState(
        backbone.params + head.params,
        backbone.buffers + head.buffers,
        backbone.accumulators + head.accumulators,
        head.rng,
    )
    return spec, model


def unfreeze(spec: NetworkSpec) -> NetworkSpec:
    layers = [_freeze(layer, trainable=True) for layer in spec.layers]
    return NetworkSpec(layers, spec.input_shape, spec.residual_groups)


def baseline_network(
    spec: NetworkSpec,
    model: ModelState,
    classes: int,
    replace_top_k_blocks: int,
    seed: int,
) -> tuple[NetworkSpec, ModelState]:
    """
    Conventional transfer learning: keep the backbone's own architecture, swap the output layer for
    a fresh one with `classes` units and retrain only the top `replace_top_k_blocks` parameterized layers.
    """
    if not spec.layers or not isinstance(spec.layers[-1], OutputSpec):
        raise ArchitectureInfeasible("baseline needs a backbone ending in an output layer")
    cut = _cut_index(spec, replace_top_k_blocks)

    layers = [_freeze(layer, trainable=i >= cut) for i, layer in enumerate(spec.layers[:-1])]
    layers.append(OutputSpec(classes))
    target = NetworkSpec(layers, spec.input_shape, spec.residual_groups)

    fresh = init_model(target, seed)
    params = [{k: np.copy(v) for k, v in p.items()} for p in model.params[:-1]] + [fresh.params[-1]]
    buffers = [{k: np.copy(v) for k, v in b.items()} for b in model.buffers[:-1]] + [fresh.buffers[-1]]
    accumulators = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    return target, ModelState(params, buffers, accumulators, fresh.rng)
