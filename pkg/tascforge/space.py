"""
The discrete hyperparameter space of the replaced head and its fixed-length encoding.

Layout of an encoded point, section by section (conv, pool, fc):

    [count dim] then per slot: [activity dim, ordinal dims..., activation one-hot...]

Ordinals map choice index i of k choices to i/(k-1) (0 when k == 1).
"""

import itertools
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import dataclasses_json
import numpy as np

from tascforge.errors import DimensionMismatch, InvalidConfig, SpaceTooLarge
from tascforge.tensor import Tensor


class Activation(StrEnum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    ELU = "elu"
    SELU = "selu"


ALL_ACTIVATIONS = tuple(Activation)
CONV_FILTER_SIZES = (1, 2, 3, 5)
CONV_FILTER_COUNTS = (32, 64, 128, 256, 512)
POOL_SIZES = (2, 3)
FC_NEURONS = (64, 128, 256, 512, 1024)
DROPOUT_RATES = tuple(round(0.1 * i, 1) for i in range(1, 10))
MAX_SLOTS = 3

TABLE_CHOICES = {
    "conv_filter_sizes": CONV_FILTER_SIZES,
    "conv_filter_counts": CONV_FILTER_COUNTS,
    "conv_activations": ALL_ACTIVATIONS,
    "pool_sizes": POOL_SIZES,
    "fc_neurons": FC_NEURONS,
    "fc_activations": ALL_ACTIVATIONS,
    "fc_dropouts": DROPOUT_RATES,
}


@dataclasses_json.dataclass_json
@dataclass
class ConvLayerConfig:
    filter_size: int
    num_filters: int
    activation: Activation


@dataclasses_json.dataclass_json
@dataclass
class PoolLayerConfig:
    filter_size: int


@dataclasses_json.dataclass_json
@dataclass
class DenseLayerConfig:
    neurons: int
    activation: Activation
    dropout: float


@dataclasses_json.dataclass_json
@dataclass
class HeadConfig:
    """One point of the search space. Every fc layer is followed by batch-norm and dropout."""

    convs: list[ConvLayerConfig] = field(default_factory=list)
    pool: PoolLayerConfig | None = None
    fcs: list[DenseLayerConfig] = field(default_factory=list)

    def key(self) -> tuple:
        """Hashable identity, used to deduplicate evaluated configs."""
        return (
            tuple((c.filter_size, c.num_filters, str(c.activation)) for c in self.convs),
            None if self.pool is None else self.pool.filter_size,
            tuple((f.neurons, str(f.activation), f.dropout) for f in self.fcs),
        )

    def describe(self) -> str:
        parts = [f"conv{c.filter_size}x{c.filter_size}/{c.num_filters}/{c.activation}" for c in self.convs]
        if self.pool is not None:
            parts.append(f"pool{self.pool.filter_size}")
        parts.extend(f"fc{f.neurons}/{f.activation}/d{f.dropout}" for f in self.fcs)
        return " -> ".join(parts) or "(output only)"


@dataclass(frozen=True)
class SearchSpace:
    conv_counts: tuple[int, ...] = (0, 1, 2, 3)
    conv_filter_sizes: tuple[int, ...] = CONV_FILTER_SIZES
    conv_filter_counts: tuple[int, ...] = CONV_FILTER_COUNTS
    conv_activations: tuple[Activation, ...] = ALL_ACTIVATIONS
    pool_counts: tuple[int, ...] = (0, 1)
    pool_sizes: tuple[int, ...] = POOL_SIZES
    fc_counts: tuple[int, ...] = (1, 2, 3)
    fc_neurons: tuple[int, ...] = FC_NEURONS
    fc_activations: tuple[Activation, ...] = ALL_ACTIVATIONS
    fc_dropouts: tuple[float, ...] = DROPOUT_RATES

    def __post_init__(self):
        for name in (
            "conv_counts",
            "conv_filter_sizes",
            "conv_filter_counts",
            "conv_activations",
            "pool_counts",
            "pool_sizes",
            "fc_counts",
            "fc_neurons",
            "fc_activations",
            "fc_dropouts",
        ):
            values = getattr(self, name)
            if len(values) == 0:
                raise InvalidConfig(f"search space choice list {name} is empty")
            if len(set(values)) != len(values):
                raise InvalidConfig(f"search space choice list {name} has duplicates")
        for name, allowed in TABLE_CHOICES.items():
            outside = [v for v in getattr(self, name) if v not in allowed]
            if outside:
                raise InvalidConfig(f"{name} has values {outside} outside the allowed {list(allowed)}")
        for name in ("conv_counts", "pool_counts", "fc_counts"):
            if any(not 0 <= c <= MAX_SLOTS for c in getattr(self, name)):
                raise InvalidConfig(f"{name} must lie in 0..{MAX_SLOTS}")
        if max(self.pool_counts) > 1:
            raise InvalidConfig("at most one pooling slot is supported")

    @property
    def conv_slots(self) -> int:
        return max(self.conv_counts)

    @property
    def pool_slots(self) -> int:
        return max(self.pool_counts)

    @property
    def fc_slots(self) -> int:
        return max(self.fc_counts)

    @property
    def dimension(self) -> int:
        conv = 1 + self.conv_slots * (3 + len(self.conv_activations))
        pool = 1 + self.pool_slots * 2
        fc = 1 + self.fc_slots * (3 + len(self.fc_activations))
        return conv + pool + fc


def _scaled(index: int, count: int) -> float:
    return 0.0 if count <= 1 else index / (count - 1)


def _snap(value: float, count: int) -> int:
    if count <= 1:
        return 0
    # round-half-down keeps ties on the lower index
    return min(max(math.ceil(value * (count - 1) - 0.5), 0), count - 1)


def _index_of[T](choices: Sequence[T], value: T, what: str) -> int:
    try:
        return list(choices).index(value)
    except ValueError:
        raise InvalidConfig(f"{what} {value!r} is not one of {list(choices)}") from None


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> HeadConfig:
    """Draw every slot count and every field uniformly over its choice list."""

    def pick[T](choices: Sequence[T]) -> T:
        return choices[int(rng.integers(len(choices)))]

    convs = [
        ConvLayerConfig(
            pick(space.conv_filter_sizes),
            pick(space.conv_filter_counts),
            pick(space.conv_activations),
        )
        for _ in range(pick(space.conv_counts))
    ]
    pool = PoolLayerConfig(pick(space.pool_sizes)) if pick(space.pool_counts) else None
    fcs = [
        DenseLayerConfig(
            pick(space.fc_neurons),
            pick(space.fc_activations),
            pick(space.fc_dropouts),
        )
        for _ in range(pick(space.fc_counts))
    ]
    return HeadConfig(convs, pool, fcs)


def _one_hot(index: int, count: int) -> list[float]:
    block = [0.0] * count
    block[index] = 1.0
    return block


def encode(space: SearchSpace, config: HeadConfig) -> Tensor:
    vector: list[float] = []

    count_index = _index_of(space.conv_counts, len(config.convs), "conv layer count")
    vector.append(_scaled(count_index, len(space.conv_counts)))
    for slot in range(space.conv_slots):
        width = 3 + len(space.conv_activations)
        if slot >= len(config.convs):
            vector.extend([0.0] * width)
            continue
        c = config.convs[slot]
        vector.append(1.0)
        vector.append(
            _scaled(_index_of(space.conv_filter_sizes, c.filter_size, "conv filter size"), len(space.conv_filter_sizes))
        )
        vector.append(
            _scaled(
                _index_of(space.conv_filter_counts, c.num_filters, "conv filter count"), len(space.conv_filter_counts)
            )
        )
        vector.extend(
            _one_hot(_index_of(space.conv_activations, c.activation, "conv activation"), len(space.conv_activations))
        )

    pool_count = 0 if config.pool is None else 1
    vector.append(_scaled(_index_of(space.pool_counts, pool_count, "pool layer count"), len(space.pool_counts)))
    if space.pool_slots:
        if config.pool is None:
            vector.extend([0.0, 0.0])
        else:
            size_index = _index_of(space.pool_sizes, config.pool.filter_size, "pool size")
            vector.extend([1.0, _scaled(size_index, len(space.pool_sizes))])

    count_index = _index_of(space.fc_counts, len(config.fcs), "fc layer count")
    vector.append(_scaled(count_index, len(space.fc_counts)))
    for slot in range(space.fc_slots):
        width = 3 + len(space.fc_activations)
        if slot >= len(config.fcs):
            vector.extend([0.0] * width)
            continue
        f = config.fcs[slot]
        vector.append(1.0)
        vector.append(_scaled(_index_of(space.fc_neurons, f.neurons, "fc neuron count"), len(space.fc_neurons)))
        vector.append(_scaled(_index_of(space.fc_dropouts, f.dropout, "dropout rate"), len(space.fc_dropouts)))
        act = _index_of(space.fc_activations, f.activation, "fc activation")
        vector.extend(_one_hot(act, len(space.fc_activations)))

    return np.array(vector, dtype=np.float64)


def _active_slots(count_dim: float, counts: Sequence[int], activity: list[bool]) -> list[int]:
    """Slots to decode: the active ones when their number is an allowed count, else a prefix of the snapped count."""
    active = [i for i, a in enumerate(activity) if a]
    if len(active) in counts:
        return active
    return list(range(counts[_snap(count_dim, len(counts))]))


def decode(space: SearchSpace, point: Tensor) -> HeadConfig:
    point = np.asarray(point, dtype=np.float64)
    if point.ndim != 1 or point.shape[0] != space.dimension:
        raise DimensionMismatch(f"encoded point has shape {point.shape}, space dimension is {space.dimension}")

    pos = 0

    def take(n: int) -> Tensor:
        nonlocal pos
        chunk = point[pos : pos + n]
        pos += n
        return chunk

    def argmax(block: Tensor) -> int:
        # np.argmax returns the first maximum, i.e. the lowest index on ties
        return int(np.argmax(block))

    conv_count_dim = float(take(1)[0])
    conv_blocks = [take(3 + len(space.conv_activations)) for _ in range(space.conv_slots)]
    pool_count_dim = float(take(1)[0])
    pool_block = take(2) if space.pool_slots else None
    fc_count_dim = float(take(1)[0])
    fc_blocks = [take(3 + len(space.fc_activations)) for _ in range(space.fc_slots)]

    convs = []
    for slot in _active_slots(conv_count_dim, space.conv_counts, [b[0] >= 0.5 for b in conv_blocks]):  # noqa: PLR2004
        block = conv_blocks[slot]
        convs.append(
            ConvLayerConfig(
                space.conv_filter_sizes[_snap(block[1], len(space.conv_filter_sizes))],
                space.conv_filter_counts[_snap(block[2], len(space.conv_filter_counts))],
                space.conv_activations[argmax(block[3:])],
            )
        )

    pool = None
    if pool_block is not None:
        pool_active = _active_slots(pool_count_dim, space.pool_counts, [pool_block[0] >= 0.5])  # noqa: PLR2004
        if pool_active:
            pool = PoolLayerConfig(space.pool_sizes[_snap(pool_block[1], len(space.pool_sizes))])

    fcs = []
    for slot in _active_slots(fc_count_dim, space.fc_counts, [b[0] >= 0.5 for b in fc_blocks]):  # noqa: PLR2004
        block = fc_blocks[slot]
        fcs.append(
            DenseLayerConfig(
                space.fc_neurons[_snap(block[1], len(space.fc_neurons))],
                space.fc_activations[argmax(block[3:])],
                space.fc_dropouts[_snap(block[2], len(space.fc_dropouts))],
            )
        )

    return HeadConfig(convs, pool, fcs)


def _per_layer_choices(space: SearchSpace) -> tuple[int, int, int]:
    conv = len(space.conv_filter_sizes) * len(space.conv_filter_counts) * len(space.conv_activations)
    fc = len(space.fc_neurons) * len(space.fc_activations) * len(space.fc_dropouts)
    return conv, len(space.pool_sizes), fc


def space_size(space: SearchSpace) -> int:
    """Number of distinct configs: the product over sections of Σ_count choices^count."""
    conv, pool, fc = _per_layer_choices(space)
    return (
        sum(conv**c for c in space.conv_counts)
        * sum(pool**c for c in space.pool_counts)
        * sum(fc**c for c in space.fc_counts)
    )


def _iter_configs(space: SearchSpace) -> Iterator[HeadConfig]:
    conv_layers = [
        ConvLayerConfig(k, n, a)
        for k, n, a in itertools.product(space.conv_filter_sizes, space.conv_filter_counts, space.conv_activations)
    ]
    fc_layers = [
        DenseLayerConfig(n, a, d)
        for n, a, d in itertools.product(space.fc_neurons, space.fc_activations, space.fc_dropouts)
    ]
    pools: list[PoolLayerConfig | None] = []
    for count in space.pool_counts:
        pools.extend([None] if count == 0 else [PoolLayerConfig(k) for k in space.pool_sizes])

    conv_stacks = [stack for c in space.conv_counts for stack in itertools.product(conv_layers, repeat=c)]
    fc_stacks = [stack for c in space.fc_counts for stack in itertools.product(fc_layers, repeat=c)]

    for convs, pool, fcs in itertools.product(conv_stacks, pools, fc_stacks):
        yield HeadConfig(
            [ConvLayerConfig(c.filter_size, c.num_filters, c.activation) for c in convs],
            None if pool is None else PoolLayerConfig(pool.filter_size),
            [DenseLayerConfig(f.neurons, f.activation, f.dropout) for f in fcs],
        )


def enumerate_space(space: SearchSpace, cap: int) -> Iterator[HeadConfig]:
    """
    Every config of the space exactly once, in a fixed order.

    :param cap: Largest space size the caller is prepared to enumerate.
    :raises SpaceTooLarge: Eagerly, before anything is yielded.
    """
    total = space_size(space)
    if total > cap:
        raise SpaceTooLarge(f"search space has {total} configs, cap is {cap}")
    return _iter_configs(space)
