import numpy as np
import pytest

from tascforge.errors import GroupMismatch, WouldEmptyLayer
from tascforge.nn.accounting import count_params
from tascforge.nn.layers import ConvSpec, FlattenSpec, OutputSpec
from tascforge.nn.network import NetworkSpec, forward, init_model
from tascforge.pruning.selection import PrunePlan
from tascforge.pruning.surgery import delete_filters
from tascforge.space import Activation


def _randomize_biases(model, rng):
    for params in model.params:
        if "b" in params:
            params["b"] += rng.normal(scale=0.1, size=params["b"].shape)


def test_consumer_conv_loses_input_channels(small_spec):
    model = init_model(small_spec, 0)
    pruned, spec = delete_filters(model, small_spec, PrunePlan({1: [2]}))

    assert spec.layers[1].filters == 3
    assert pruned.params[1]["w"].shape == (3, 2, 2, 3)
    assert pruned.params[4]["w"].shape == (27, 5)
    assert pruned.accumulators[4]["w"].shape == (27, 5)
    assert model.params[1]["w"].shape == (4, 2, 2, 3)

    pruned, spec = delete_filters(model, small_spec, PrunePlan({0: [0]}))
    assert pruned.params[1]["w"].shape == (4, 2, 2, 2)


def test_pruned_network_equals_zero_masked_original(small_spec, rng):
    model = init_model(small_spec, 1)
    _randomize_biases(model, rng)
    plan = PrunePlan({0: [1], 1: [0, 3]})
    pruned, spec = delete_filters(model, small_spec, plan)

    masked = model.copy()
    masked.params[1]["w"][..., 1] = 0.0
    rows = np.arange(36).reshape(3, 3, 4)[..., [0, 3]].ravel()
    masked.params[4]["w"][rows] = 0.0

    x = rng.normal(size=(5, 6, 6, 2))
    np.testing.assert_allclose(forward(pruned, spec, x), forward(masked, small_spec, x), atol=1e-6)


def test_param_count_closed_form(small_spec):
    model = init_model(small_spec, 0)
    _, spec = delete_filters(model, small_spec, PrunePlan({1: [0, 1]}))
    removed = 2 * (2 * 2 * 3 + 1) + 2 * 9 * 5
    assert count_params(small_spec)[0] - count_params(spec)[0] == removed


def test_residual_group_pruned_together(rng):
    spec = NetworkSpec(
        [
            ConvSpec(1, 4, Activation.RELU),
            ConvSpec(1, 4, Activation.TANH),
            ConvSpec(1, 4, Activation.TANH),
            FlattenSpec(),
            OutputSpec(3),
        ],
        (2, 2, 1),
        [[0, 2]],
    )
    model = init_model(spec, 2)
    _randomize_biases(model, rng)
    pruned, pruned_spec = delete_filters(model, spec, PrunePlan({0: [1], 2: [1]}, [[0, 2]]))

    assert [pruned_spec.layers[i].filters for i in (0, 1, 2)] == [3, 4, 3]
    assert pruned_spec.residual_groups == [[0, 2]]

    masked = model.copy()
    masked.params[1]["w"][..., 1] = 0.0
    masked.params[4]["w"][np.arange(16).reshape(2, 2, 4)[..., 1].ravel()] = 0.0

    x = rng.normal(size=(4, 2, 2, 1))
    np.testing.assert_allclose(forward(pruned, pruned_spec, x), forward(masked, spec, x), atol=1e-6)


def test_group_mismatch(rng):
    spec = NetworkSpec(
        [ConvSpec(1, 4, Activation.RELU), ConvSpec(1, 4, Activation.RELU), FlattenSpec(), OutputSpec(2)],
        (2, 2, 1),
        [[0, 1]],
    )
    model = init_model(spec, 0)
    with pytest.raises(GroupMismatch):
        delete_filters(model, spec, PrunePlan({0: [1], 1: [2]}))
    with pytest.raises(GroupMismatch):
        delete_filters(model, spec, PrunePlan({0: [1]}))


def test_would_empty_layer(small_spec):
    with pytest.raises(WouldEmptyLayer):
        delete_filters(init_model(small_spec, 0), small_spec, PrunePlan({0: [0, 1, 2]}))


def test_pruned_network_still_runs(small_spec, rng):
    pruned, spec = delete_filters(init_model(small_spec, 0), small_spec, PrunePlan({0: [2], 1: [1]}))
    probs = forward(pruned, spec, rng.normal(size=(3, 6, 6, 2)))
    assert probs.shape == (3, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
