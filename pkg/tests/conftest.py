import numpy as np
import pytest

from tascforge.dataio import Dataset, generate_synthetic, split
from tascforge.nn.layers import ConvSpec, DenseSpec, FlattenSpec, MaxPoolSpec, OutputSpec
from tascforge.nn.network import NetworkSpec
from tascforge.space import Activation


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec() -> NetworkSpec:
    """2 conv layers (the second one pool-fed into flatten) and a dense layer on 6x6x2 inputs."""
    return NetworkSpec(
        [
            ConvSpec(2, 3, Activation.TANH),
            ConvSpec(2, 4, Activation.SIGMOID),
            MaxPoolSpec(2, 1),
            FlattenSpec(),
            DenseSpec(5, Activation.TANH),
            OutputSpec(3),
        ],
        (6, 6, 2),
    )


@pytest.fixture
def source_splits() -> tuple[Dataset, Dataset]:
    data = generate_synthetic(4, 30, 10, 10, 1, seed=5)
    return split(data, 0.25, np.random.default_rng(5))
