import math
from dataclasses import dataclass, field
from typing import Protocol

import dataclasses_json
import numpy as np
from loguru import logger

from tascforge.nn.losses import ClassWeights, FilterPair, weighted_cross_entropy
from tascforge.nn.network import ModelState, NetworkSpec, forward, one_hot, train_step
from tascforge.tensor import Tensor
from tascforge.util import make_chunks

INITIAL_LR = 1e-2
DECAY_FACTOR = math.sqrt(0.1)
LR_FLOOR = 1e-5


class LabelledData(Protocol):
    images: Tensor
    labels: np.ndarray
    class_count: int


class SnapshotSink(Protocol):
    def record(self, model: ModelState, spec: NetworkSpec) -> None: ...


@dataclass
class PlateauDecay:
    """Multiplies the rate by √0.1 after any epoch whose validation loss rose, never going below the floor."""

    lr: float = INITIAL_LR
    factor: float = DECAY_FACTOR
    floor: float = LR_FLOOR
    previous: float | None = None

    def step(self, val_loss: float) -> float:
        if self.previous is not None and val_loss > self.previous:
            self.lr = max(self.lr * self.factor, self.floor)
            logger.debug(f"validation loss rose {self.previous:.5f} -> {val_loss:.5f}, lr now {self.lr:.3e}")
        self.previous = val_loss
        return self.lr


@dataclass
class TrainSettings:
    lr: float = INITIAL_LR
    batch_size: int = 32
    seed: int = 0
    eval_batch_size: int = 256


@dataclasses_json.dataclass_json
@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    regularizer: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: ModelState
    best_val_accuracy: float
    log: list[EpochRecord] = field(default_factory=list)


def predict(model: ModelState, spec: NetworkSpec, images: Tensor, batch_size: int = 256) -> Tensor:
    if images.shape[0] == 0:
        return np.zeros((0, *spec.output_shape))
    return np.concatenate([forward(model, spec, chunk) for chunk in make_chunks(images, batch_size)])


def evaluate_accuracy(model: ModelState, spec: NetworkSpec, data: LabelledData) -> float:
    """Fraction of samples whose argmax prediction is the label; eval mode."""
    if data.labels.shape[0] == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    probs = predict(model, spec, data.images)
    return float(np.mean(np.argmax(probs, axis=1) == data.labels))


def _validate(model: ModelState, spec: NetworkSpec, data: LabelledData, batch_size: int) -> tuple[float, float]:
    probs = predict(model, spec, data.images, batch_size)
    loss = weighted_cross_entropy(probs, one_hot(data.labels, data.class_count), ClassWeights.uniform(data.class_count))
    accuracy = float(np.mean(np.argmax(probs, axis=1) == data.labels))
    return loss, accuracy


def train(
    model: ModelState,
    spec: NetworkSpec,
    train_data: LabelledData,
    val_data: LabelledData,
    *,
    epochs: int,
    weights: ClassWeights,
    reg_pairs: list[FilterPair] | None = None,
    snapshot_store: SnapshotSink | None = None,
    settings: TrainSettings | None = None,
) -> TrainResult:
    """
    Train for `epochs` passes with Adagrad and plateau decay, in place.

    :param reg_pairs: When given, the similarity regularizer over these pairs joins the loss.
    :param snapshot_store: Receives the model after every epoch.
    :return: The trained model, the best validation accuracy over all epochs and the per-epoch log.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be at least 1, got {epochs}")
    settings = settings or TrainSettings()

    rng = np.random.default_rng(settings.seed)
    schedule = PlateauDecay(lr=settings.lr)
    targets = one_hot(train_data.labels, train_data.class_count)
    n = train_data.labels.shape[0]

    best = 0.0
    log: list[EpochRecord] = []
    for epoch in range(1, epochs + 1):
        lr = schedule.lr
        order = rng.permutation(n)
        total, reg, batches = 0.0, 0.0, 0
        for batch in make_chunks(order, settings.batch_size):
            _, loss = train_step(model, spec, train_data.images[batch], targets[batch], weights, reg_pairs, lr)
            total += loss.total
            reg += loss.regularizer
            batches += 1

        val_loss, val_accuracy = _validate(model, spec, val_data, settings.eval_batch_size)
        schedule.step(val_loss)
        best = max(best, val_accuracy)

        record = EpochRecord(epoch, lr, total / batches, reg / batches, val_loss, val_accuracy)
        log.append(record)
        logger.debug(
            f"epoch {epoch}/{epochs}: loss={record.train_loss:.4f} reg={record.regularizer:.4f} "
            f"val_loss={val_loss:.4f} val_acc={val_accuracy:.4f} lr={lr:.2e}"
        )

        if snapshot_store is not None:
            snapshot_store.record(model, spec)

    return TrainResult(model, best, log)
