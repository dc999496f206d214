import dataclasses

import numpy as np
import pytest

from tascforge.errors import ArchitectureInfeasible, NonFiniteLoss, ShapeMismatch
from tascforge.nn.layers import ConvSpec, DenseSpec, DropoutSpec, FlattenSpec, MaxPoolSpec, OutputSpec, activate
from tascforge.nn.losses import ClassWeights, FilterPair
from tascforge.nn.network import (
    NetworkSpec,
    first_trainable_layer,
    forward,
    init_model,
    loss_and_gradients,
    one_hot,
    train_step,
)
from tascforge.space import Activation


def _batch(spec: NetworkSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    x = rng.normal(size=(n, *spec.input_shape))
    labels = rng.integers(spec.output_shape[0], size=n)
    return x, one_hot(labels, spec.output_shape[0])


def _check_gradients(spec, model, x, y, weights, pairs=None, samples=8, rng=None):
    _, grads = loss_and_gradients(model, spec, x, y, weights, pairs)
    rng = rng or np.random.default_rng(0)
    h = 1e-5
    checked = 0
    for i, params in enumerate(model.params):
        for name, value in params.items():
            if name not in grads[i]:
                continue
            for _ in range(samples):
                idx = tuple(int(rng.integers(s)) for s in value.shape)
                saved = value[idx]
                value[idx] = saved + h
                plus = loss_and_gradients(model, spec, x, y, weights, pairs)[0].total
                value[idx] = saved - h
                minus = loss_and_gradients(model, spec, x, y, weights, pairs)[0].total
                value[idx] = saved
                numeric = (plus - minus) / (2 * h)
                analytic = grads[i][name][idx]
                assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, (i, name, idx)
                checked += 1
    assert checked > 0


def test_spec_shapes(small_spec):
    assert small_spec.shapes() == [(6, 6, 2), (5, 5, 3), (4, 4, 4), (3, 3, 4), (36,), (5,), (3,)]
    assert small_spec.output_shape == (3,)
    assert small_spec.conv_layers() == [0, 1]


def test_spec_dict_conversion(small_spec):
    restored = NetworkSpec.from_dict(small_spec.to_dict())
    assert restored == small_spec


def test_residual_group_validation():
    convs = [ConvSpec(1, 3, Activation.RELU), ConvSpec(1, 3, Activation.RELU), ConvSpec(2, 3, Activation.RELU)]
    tail = [FlattenSpec(), OutputSpec(2)]
    NetworkSpec(convs + tail, (4, 4, 1), [[1, 0]])
    with pytest.raises(ArchitectureInfeasible):
        NetworkSpec(convs + tail, (4, 4, 1), [[0, 2]])
    with pytest.raises(ArchitectureInfeasible):
        NetworkSpec(convs + tail, (4, 4, 1), [[0, 3]])
    with pytest.raises(ArchitectureInfeasible):
        NetworkSpec(convs + tail, (4, 4, 1), [[0]])
    with pytest.raises(ArchitectureInfeasible):
        NetworkSpec(convs + tail, (4, 4, 1), [[0, 1], [1, 2]])


def test_init_is_deterministic(small_spec):
    a, b = init_model(small_spec, 3), init_model(small_spec, 3)
    for pa, pb in zip(a.params, b.params, strict=True):
        assert pa.keys() == pb.keys()
        for name in pa:
            np.testing.assert_array_equal(pa[name], pb[name])
    assert a.params[0]["w"].shape == (3, 2, 2, 2)
    assert a.params[4]["w"].shape == (36, 5)
    np.testing.assert_array_equal(a.params[0]["b"], 0.0)


def test_forward_rejects_wrong_input(small_spec):
    model = init_model(small_spec, 0)
    with pytest.raises(ShapeMismatch):
        forward(model, small_spec, np.zeros((2, 5, 6, 2)))


def test_zero_output_weights_give_uniform_probabilities(small_spec, rng):
    model = init_model(small_spec, 0)
    model.params[-1]["w"][:] = 0.0
    probs = forward(model, small_spec, rng.normal(size=(4, 6, 6, 2)))
    np.testing.assert_allclose(probs, 1.0 / 3.0)


def test_gradients_match_finite_differences(small_spec, rng):
    model = init_model(small_spec, 1)
    x, y = _batch(small_spec, 5, rng)
    _check_gradients(small_spec, model, x, y, ClassWeights(np.array([1.0, 0.5, 2.0])), rng=rng)


def test_gradients_with_regularizer(small_spec, rng):
    model = init_model(small_spec, 2)
    x, y = _batch(small_spec, 4, rng)
    pairs = [FilterPair(0, 0, 1, 0.9), FilterPair(1, 1, 3, 0.5), FilterPair(1, 0, 2, 0.4)]
    loss, _ = loss_and_gradients(model, small_spec, x, y, ClassWeights.uniform(3), pairs)
    assert 0.0 < loss.regularizer
    assert loss.total == pytest.approx(loss.cross_entropy + loss.regularizer)
    _check_gradients(small_spec, model, x, y, ClassWeights.uniform(3), pairs, rng=rng)


def test_gradients_with_batchnorm(rng):
    spec = NetworkSpec(
        [
            ConvSpec(2, 3, Activation.ELU, has_batchnorm=True),
            FlattenSpec(),
            DenseSpec(4, Activation.SELU, has_batchnorm=True),
            OutputSpec(2),
        ],
        (4, 4, 1),
    )
    model = init_model(spec, 4)
    for params in model.params:
        if "gamma" in params:
            params["gamma"] += rng.uniform(-0.3, 0.3, size=params["gamma"].shape)
            params["beta"] += rng.uniform(-0.3, 0.3, size=params["beta"].shape)
    x, y = _batch(spec, 6, rng)
    _check_gradients(spec, model, x, y, ClassWeights.uniform(2), rng=rng)


def _residual_spec() -> NetworkSpec:
    return NetworkSpec(
        [
            ConvSpec(1, 3, Activation.TANH),
            ConvSpec(1, 3, Activation.SIGMOID),
            FlattenSpec(),
            OutputSpec(2),
        ],
        (3, 3, 2),
        [[0, 1]],
    )


def test_residual_forward(rng):
    spec = _residual_spec()
    model = init_model(spec, 5)
    x = rng.normal(size=(2, 3, 3, 2))

    p0, p1, p3 = model.params[0], model.params[1], model.params[3]
    h0 = activate(Activation.TANH, x @ p0["w"][:, 0, 0, :].T + p0["b"])
    h1 = activate(Activation.SIGMOID, h0 @ p1["w"][:, 0, 0, :].T + p1["b"]) + h0
    logits = h1.reshape(2, -1) @ p3["w"] + p3["b"]
    expected = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)

    np.testing.assert_allclose(forward(model, spec, x), expected, atol=1e-12)


def test_residual_gradients(rng):
    spec = _residual_spec()
    model = init_model(spec, 6)
    x, y = _batch(spec, 3, rng)
    _check_gradients(spec, model, x, y, ClassWeights.uniform(2), [FilterPair(0, 0, 2, 0.8)], rng=rng)


def test_training_overfits_a_small_batch(small_spec, rng):
    model = init_model(small_spec, 7)
    x, y = _batch(small_spec, 8, rng)
    weights = ClassWeights.uniform(3)
    first = None
    for _ in range(200):
        model, loss = train_step(model, small_spec, x, y, weights, None, 0.1)
        first = first if first is not None else loss.total
    assert loss.total < 0.3 * first


def test_frozen_layers_do_not_move(small_spec, rng):
    layers = list(small_spec.layers)
    layers[0] = dataclasses.replace(layers[0], trainable=False)
    layers[1] = dataclasses.replace(layers[1], trainable=False)
    spec = NetworkSpec(layers, small_spec.input_shape)
    assert first_trainable_layer(spec) == 4

    model = init_model(spec, 8)
    frozen = model.params[0]["w"].copy()
    head = model.params[4]["w"].copy()
    x, y = _batch(spec, 4, rng)
    train_step(model, spec, x, y, ClassWeights.uniform(3), None, 0.05)

    np.testing.assert_array_equal(model.params[0]["w"], frozen)
    assert not np.array_equal(model.params[4]["w"], head)


def test_zero_step_leaves_model_unchanged(small_spec, rng):
    model = init_model(small_spec, 9)
    x = rng.normal(size=(3, 6, 6, 2))
    # a saturated correct prediction has no cross-entropy gradient
    model.params[-1]["w"][:] = 0.0
    model.params[-1]["b"][:] = np.array([1e6, 0.0, 0.0])
    snapshot = model.copy()
    _, loss = train_step(model, small_spec, x, one_hot(np.zeros(3, dtype=int), 3), ClassWeights.uniform(3), None, 0.1)
    assert loss.total == 0.0
    for pa, pb in zip(model.params, snapshot.params, strict=True):
        for name in pa:
            np.testing.assert_array_equal(pa[name], pb[name])


def test_dropout_is_identity_in_eval_mode(rng):
    spec = NetworkSpec([FlattenSpec(), DenseSpec(6, Activation.RELU), DropoutSpec(0.5), OutputSpec(2)], (2, 2, 1))
    model = init_model(spec, 0)
    x = rng.normal(size=(5, 2, 2, 1))
    np.testing.assert_array_equal(forward(model, spec, x), forward(model, spec, x))


def test_maxpool_network_shapes(rng):
    spec = NetworkSpec([ConvSpec(3, 4, Activation.RELU), MaxPoolSpec(2, 2), FlattenSpec(), OutputSpec(3)], (8, 8, 1))
    model = init_model(spec, 0)
    assert forward(model, spec, rng.normal(size=(2, 8, 8, 1))).shape == (2, 3)


def test_train_step_checks(small_spec, rng):
    model = init_model(small_spec, 0)
    x, y = _batch(small_spec, 2, rng)
    with pytest.raises(ValueError):
        train_step(model, small_spec, x, y, ClassWeights.uniform(3), None, 0.0)

    model.params[4]["w"][:] = np.nan
    with pytest.raises(NonFiniteLoss):
        train_step(model, small_spec, x, y, ClassWeights.uniform(3), None, 0.1)


def test_gradients_through_frozen_batchnorm(rng):
    spec = NetworkSpec(
        [
            ConvSpec(2, 3, Activation.TANH),
            FlattenSpec(),
            DenseSpec(4, Activation.TANH, has_batchnorm=True, trainable=False),
            OutputSpec(2),
        ],
        (3, 3, 1),
    )
    model = init_model(spec, 3)
    model.buffers[2]["running_mean"] += rng.normal(size=4)
    model.buffers[2]["running_var"] *= rng.uniform(0.5, 2.0, size=4)
    x, y = _batch(spec, 5, rng)
    _, grads = loss_and_gradients(model, spec, x, y, ClassWeights.uniform(2))
    assert "gamma" not in grads[2]
    _check_gradients(spec, model, x, y, ClassWeights.uniform(2), rng=rng)
