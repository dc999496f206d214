import numpy as np
import pytest

from tascforge.errors import InconsistentShapes, LayerIneligible, ZeroNormVector
from tascforge.nn.network import init_model
from tascforge.pruning.trajectory import TrajectoryStore, build_trajectories, cosine_similarity, similarity_matrix


def test_cosine_similarity(rng):
    u = rng.normal(size=12)
    v = rng.normal(size=12)
    assert cosine_similarity(u, u) == pytest.approx(1.0)
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert cosine_similarity(u, -u) == pytest.approx(-1.0)
    assert cosine_similarity(4.5 * u, v) == pytest.approx(cosine_similarity(u, v))
    assert -1.0 <= cosine_similarity(u, v) <= 1.0


def test_cosine_of_zero_vector():
    with pytest.raises(ZeroNormVector):
        cosine_similarity(np.zeros(3), np.ones(3))


def test_single_epoch_trajectory_is_the_flattened_filter(rng):
    w = rng.normal(size=(5, 2, 2, 3))
    np.testing.assert_array_equal(build_trajectories([w]), w.reshape(5, -1))


def test_trajectory_layout(rng):
    snapshots = [rng.normal(size=(4, 2, 2, 1)) for _ in range(3)]
    trajectories = build_trajectories(snapshots)
    assert trajectories.shape == (4, 12)
    for _ in range(20):
        f, e, o = int(rng.integers(4)), int(rng.integers(3)), int(rng.integers(4))
        assert trajectories[f, e * 4 + o] == snapshots[e][f].ravel()[o]


def test_trajectory_shape_checks(rng):
    with pytest.raises(InconsistentShapes):
        build_trajectories([])
    with pytest.raises(InconsistentShapes):
        build_trajectories([rng.normal(size=(4, 2, 2, 1)), rng.normal(size=(3, 2, 2, 1))])


def test_similarity_matrix(rng):
    sims = similarity_matrix(rng.normal(size=(6, 10)))
    np.testing.assert_allclose(sims, sims.T)
    np.testing.assert_allclose(np.diag(sims), 1.0)
    with pytest.raises(ZeroNormVector):
        similarity_matrix(np.vstack([np.ones(3), np.zeros(3)]))


def test_store_eligibility(small_spec):
    assert TrajectoryStore(threshold=3).eligible_layers(small_spec) == [0, 1]
    assert TrajectoryStore(threshold=4).eligible_layers(small_spec) == [1]
    assert TrajectoryStore(threshold=1).eligible_layers(small_spec) == [0, 1]
    assert TrajectoryStore(threshold=16).eligible_layers(small_spec) == []


def test_store_records_copies(small_spec):
    model = init_model(small_spec, 0)
    store = TrajectoryStore(threshold=4)
    assert store.epochs == 0

    store.record(model, small_spec)
    model.params[1]["w"] += 1.0
    store.record(model, small_spec)

    assert store.layers() == [1]
    assert store.epochs == 2
    assert store.trajectories(1).shape == (4, 2 * 2 * 2 * 3)
    np.testing.assert_array_equal(store.final_weights(1), model.params[1]["w"])
    assert not np.array_equal(store.snapshots[1][0], store.snapshots[1][1])

    with pytest.raises(LayerIneligible):
        store.trajectories(0)


def test_group_trajectories(rng):
    store = TrajectoryStore(threshold=2)
    store.snapshots = {0: [rng.normal(size=(4, 1, 1, 2))], 1: [rng.normal(size=(4, 1, 1, 3))]}
    assert store.group_trajectories([0, 1]).shape == (4, 5)
