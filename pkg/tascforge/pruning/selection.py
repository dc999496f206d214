from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from loguru import logger

from tascforge.errors import InsufficientDistinctFilters, LayerIneligible
from tascforge.nn.losses import FilterPair
from tascforge.pruning.trajectory import TrajectoryStore, similarity_matrix
from tascforge.tensor import Tensor
from tascforge.util import prune_count


@dataclass
class PrunePlan:
    """Filter indices to delete per conv layer. Members of a group must share one index set."""

    victims: dict[int, list[int]] = field(default_factory=dict)
    groups: list[list[int]] = field(default_factory=list)

    def total(self) -> int:
        return sum(len(v) for v in self.victims.values())

    def describe(self) -> list[str]:
        lines = []
        for layer, victims in sorted(self.victims.items()):
            group = next((g for g in self.groups if layer in g), None)
            shared = "" if group is None else f" (group {'+'.join(map(str, group))})"
            lines.append(f"layer {layer}{shared}: delete filters {victims}")
        return lines


def rank_pairs(trajectories: Tensor, layer: int) -> list[FilterPair]:
    """All C(n,2) pairs by descending similarity; equal similarities keep lexicographic (i, j) order."""
    sims = similarity_matrix(trajectories)
    rows, cols = np.triu_indices(sims.shape[0], k=1)
    values = sims[rows, cols]
    order = np.argsort(-values, kind="stable")
    return [FilterPair(layer, int(rows[o]), int(cols[o]), float(values[o])) for o in order]


def make_filter_pairs(
    store: TrajectoryStore,
    layers: int | Sequence[int],
    p: float,
    *,
    limit: bool = True,
) -> list[FilterPair]:
    """
    The most similar filter pairs of a layer, or of a residual group ranked on concatenated trajectories.

    :param layers: A conv layer index or the members of a residual group; pairs are labelled with the first.
    :param p: Prune rate; ⌈p·n⌉ pairs are returned.
    :param limit: When false, return the full ranking instead.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"prune rate must lie in (0, 1), got {p}")
    members = [layers] if isinstance(layers, int) else list(layers)

    trajectories = store.group_trajectories(members) if len(members) > 1 else store.trajectories(members[0])
    n = trajectories.shape[0]
    if n < max(2, store.threshold):
        raise LayerIneligible(f"layer {members[0]} has {n} filters, threshold is {store.threshold}")

    ranked = rank_pairs(trajectories, members[0])
    count = prune_count(p, n)
    logger.debug(f"layer {members}: {len(ranked)} pairs ranked, top similarity {ranked[0].similarity:.4f}")
    return ranked[:count] if limit else ranked


def filter_l1_norms(weights: Tensor) -> Tensor:
    """ℓ1-norm of every filter; axis 0 indexes filters."""
    return np.abs(weights.reshape(weights.shape[0], -1)).sum(axis=1)


def _weaker(pair: FilterPair, norms: Tensor) -> tuple[int, int]:
    """(victim, survivor) of a pair: smaller ℓ1 goes, ties go to the lower index."""
    if norms[pair.j] < norms[pair.i]:
        return pair.j, pair.i
    return pair.i, pair.j


def select_prune_filters(pairs: Sequence[FilterPair], weights: dict[int, Tensor]) -> dict[int, list[int]]:
    """
    Per pair, the member with the smaller final ℓ1-norm. Repeated victims count once.

    :param weights: Final-epoch weights of every paired layer, filter-major.
    """
    victims: dict[int, set[int]] = {}
    norms = {layer: filter_l1_norms(w) for layer, w in weights.items()}
    for pair in pairs:
        victim, _ = _weaker(pair, norms[pair.layer])
        victims.setdefault(pair.layer, set()).add(victim)
    return {layer: sorted(v) for layer, v in victims.items()}


def enforce_group_exact(pairs: Sequence[FilterPair], weights: Tensor, required_count: int) -> list[int]:
    """
    Exactly `required_count` distinct victims from a similarity ranking.

    When a pair's weaker member is already chosen, its other member is taken instead; pairs with both
    members chosen are skipped.
    """
    n = weights.shape[0]
    if required_count > n - 1:
        raise InsufficientDistinctFilters(f"cannot delete {required_count} of {n} filters and keep one")

    norms = filter_l1_norms(weights)
    chosen: list[int] = []
    for pair in pairs:
        if len(chosen) == required_count:
            break
        victim, other = _weaker(pair, norms)
        if victim not in chosen:
            chosen.append(victim)
        elif other not in chosen:
            chosen.append(other)

    if len(chosen) < required_count:
        raise InsufficientDistinctFilters(f"ranking yields {len(chosen)} distinct filters, {required_count} required")
    return sorted(chosen)
