from types import SimpleNamespace

import numpy as np
import pytest

from tascforge.nn.layers import ConvSpec, FlattenSpec, MaxPoolSpec, OutputSpec
from tascforge.nn.losses import ClassWeights
from tascforge.nn.network import ModelState, NetworkSpec, init_model
from tascforge.nn.training import PlateauDecay, TrainSettings, evaluate_accuracy, predict, train
from tascforge.space import Activation


@pytest.fixture
def tiny_spec() -> NetworkSpec:
    return NetworkSpec(
        [ConvSpec(3, 4, Activation.RELU), MaxPoolSpec(2, 2), FlattenSpec(), OutputSpec(4)],
        (10, 10, 1),
    )


class CountingSink:
    def __init__(self):
        self.seen: list[np.ndarray] = []

    def record(self, model: ModelState, spec: NetworkSpec):
        self.seen.append(model.params[0]["w"].copy())


def test_plateau_decay():
    schedule = PlateauDecay()
    lrs = [schedule.step(loss) for loss in (1.0, 0.9, 0.95, 0.8, 0.85)]
    assert lrs[:2] == [1e-2, 1e-2]
    assert lrs[2] == pytest.approx(3.1623e-3, rel=1e-4)
    assert lrs[3] == lrs[2]
    assert lrs[4] == pytest.approx(1e-3)


def test_plateau_decay_floor():
    schedule = PlateauDecay(lr=2e-5)
    for loss in range(10):
        schedule.step(float(loss))
    assert schedule.lr == 1e-5


def test_train_records_one_snapshot_per_epoch(tiny_spec, source_splits):
    train_data, val_data = source_splits
    sink = CountingSink()
    result = train(
        init_model(tiny_spec, 0),
        tiny_spec,
        train_data,
        val_data,
        epochs=3,
        weights=ClassWeights.uniform(4),
        snapshot_store=sink,
        settings=TrainSettings(lr=0.05, batch_size=16),
    )
    assert len(sink.seen) == 3
    assert not np.array_equal(sink.seen[0], sink.seen[2])
    assert [r.epoch for r in result.log] == [1, 2, 3]
    assert result.best_val_accuracy == max(r.val_accuracy for r in result.log)
    assert 0.0 <= result.best_val_accuracy <= 1.0
    assert all(r.regularizer == 0.0 for r in result.log)


def test_train_single_epoch(tiny_spec, source_splits):
    train_data, val_data = source_splits
    sink = CountingSink()
    train(
        init_model(tiny_spec, 0),
        tiny_spec,
        train_data,
        val_data,
        epochs=1,
        weights=ClassWeights.uniform(4),
        snapshot_store=sink,
    )
    assert len(sink.seen) == 1


def test_train_is_deterministic(tiny_spec, source_splits):
    train_data, val_data = source_splits
    runs = [
        train(
            init_model(tiny_spec, 1),
            tiny_spec,
            train_data,
            val_data,
            epochs=2,
            weights=ClassWeights.uniform(4),
            settings=TrainSettings(lr=0.05, seed=4),
        )
        for _ in range(2)
    ]
    np.testing.assert_array_equal(runs[0].model.params[0]["w"], runs[1].model.params[0]["w"])
    assert runs[0].log == runs[1].log


def test_training_learns_the_synthetic_task(tiny_spec, source_splits):
    train_data, val_data = source_splits
    result = train(
        init_model(tiny_spec, 2),
        tiny_spec,
        train_data,
        val_data,
        epochs=15,
        weights=ClassWeights.uniform(4),
        settings=TrainSettings(lr=0.05, batch_size=16),
    )
    assert result.best_val_accuracy > 0.4


def test_train_rejects_zero_epochs(tiny_spec, source_splits):
    with pytest.raises(ValueError):
        train(init_model(tiny_spec, 0), tiny_spec, *source_splits, epochs=0, weights=ClassWeights.uniform(4))


def test_predict_and_accuracy_edges(tiny_spec):
    model = init_model(tiny_spec, 0)
    assert predict(model, tiny_spec, np.zeros((0, 10, 10, 1))).shape == (0, 4)
    empty = SimpleNamespace(images=np.zeros((0, 10, 10, 1)), labels=np.zeros(0, dtype=int), class_count=4)
    with pytest.raises(ValueError):
        evaluate_accuracy(model, tiny_spec, empty)


def test_predict_batches_match_single_pass(tiny_spec, rng):
    model = init_model(tiny_spec, 0)
    images = rng.uniform(size=(10, 10, 10, 1))
    np.testing.assert_allclose(predict(model, tiny_spec, images, batch_size=3), predict(model, tiny_spec, images))
