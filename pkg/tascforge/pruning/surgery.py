import dataclasses

import numpy as np
from loguru import logger

from tascforge.errors import ArchitectureInfeasible, GroupMismatch, WouldEmptyLayer
from tascforge.nn.layers import ConvSpec, DenseSpec, DropoutSpec, FlattenSpec, MaxPoolSpec, OutputSpec
from tascforge.nn.network import ModelState, NetworkSpec
from tascforge.pruning.selection import PrunePlan


def _check_plan(spec: NetworkSpec, plan: PrunePlan):
    for layer, victims in plan.victims.items():
        if not 0 <= layer < len(spec.layers) or not isinstance(spec.layers[layer], ConvSpec):
            raise ArchitectureInfeasible(f"layer {layer} is not a conv layer")
        filters = spec.layers[layer].filters
        if len(set(victims)) != len(victims) or any(not 0 <= v < filters for v in victims):
            raise ValueError(f"layer {layer}: victims {victims} are not distinct indices below {filters}")
        if len(victims) >= filters:
            raise WouldEmptyLayer(f"layer {layer}: deleting {len(victims)} of {filters} filters leaves none")

    for group in spec.residual_groups + plan.groups:
        sets = {tuple(sorted(plan.victims.get(i, []))) for i in group}
        if len(sets) > 1:
            raise GroupMismatch(f"residual group {group} would lose different filters: {sorted(sets)}")


def _consumer(spec: NetworkSpec, layer: int) -> int | None:
    """First layer after `layer` that is not a channel-preserving pass-through."""
    j = layer + 1
    while j < len(spec.layers) and isinstance(spec.layers[j], MaxPoolSpec | DropoutSpec):
        j += 1
    return j if j < len(spec.layers) else None


def _slice(model: ModelState, layer: int, names: tuple[str, ...], index, axis: int):
    for group in (model.params, model.buffers, model.accumulators):
        for name in names:
            if name in group[layer]:
                group[layer][name] = np.take(group[layer][name], index, axis=axis)


def delete_filters(model: ModelState, spec: NetworkSpec, plan: PrunePlan) -> tuple[ModelState, NetworkSpec]:
    """
    Remove the planned filters and every weight slice that reads their outputs.

    Consumers are the next conv (input channels) or, past a flatten, the next dense/output layer
    (the input rows of every spatial position of the channel). Returns new objects.
    """
    _check_plan(spec, plan)
    shapes = spec.shapes()
    pruned = model.copy()
    layers = list(spec.layers)

    for layer, victims in sorted(plan.victims.items()):
        if not victims:
            continue
        filters = spec.layers[layer].filters
        keep = np.setdiff1d(np.arange(filters), victims)

        _slice(pruned, layer, ("w", "b", "gamma", "beta", "running_mean", "running_var"), keep, axis=0)
        layers[layer] = dataclasses.replace(layers[layer], filters=len(keep))

        consumer = _consumer(spec, layer)
        match None if consumer is None else spec.layers[consumer]:
            case ConvSpec():
                _slice(pruned, consumer, ("w",), keep, axis=3)
            case FlattenSpec():
                dense = _consumer(spec, consumer)
                if dense is None or not isinstance(spec.layers[dense], DenseSpec | OutputSpec):
                    raise ArchitectureInfeasible(f"flatten at {consumer} does not feed a dense layer")
                h, w, c = shapes[consumer]
                rows = np.flatnonzero(np.isin(np.arange(h * w * c) % c, keep))
                _slice(pruned, dense, ("w",), rows, axis=0)
            case None:
                pass
            case other:
                raise ArchitectureInfeasible(f"conv layer {layer} feeds unsupported consumer {other!r}")

        logger.debug(f"layer {layer}: deleted filters {victims}, {len(keep)} remain")

    return pruned, NetworkSpec(layers, spec.input_shape, spec.residual_groups)
