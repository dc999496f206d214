"""
The optimize → prune → retrain loop.

Each iteration pairs the most similar filters from the latest trajectories, pulls the pairs together
with the similarity regularizer, deletes the weaker member of every pair and finetunes. An iteration
is kept only while validation accuracy stays within `min_diff` of the best seen; the first one that
drifts further ends the loop and is discarded.
"""

import dataclasses
from dataclasses import dataclass, field

import dataclasses_json
import numpy as np
from loguru import logger

from tascforge.errors import InsufficientDistinctFilters, LayerIneligible, NoEligibleLayers
from tascforge.nn.accounting import count_flops, count_params
from tascforge.nn.losses import ClassWeights, FilterPair
from tascforge.nn.network import ModelState, NetworkSpec
from tascforge.nn.training import LabelledData, TrainSettings, evaluate_accuracy, train
from tascforge.pruning.selection import PrunePlan, enforce_group_exact, make_filter_pairs, select_prune_filters
from tascforge.pruning.surgery import delete_filters
from tascforge.pruning.trajectory import TrajectoryStore, eligible_conv_layers
from tascforge.util import prune_count


@dataclass
class PruneSettings:
    rate: float = 0.05
    min_diff: float = 0.02
    epochs_each: int = 50
    eligibility_threshold: int = 16
    max_iterations: int = 10


@dataclasses_json.dataclass_json
@dataclass
class IterationRecord:
    iteration: int
    val_accuracy: float
    total_params: int
    trainable_params: int
    flops: int
    eligible_flops: int
    victims: dict[str, list[int]] = field(default_factory=dict)
    predicted_param_savings: int = 0
    predicted_flop_savings: int = 0
    accepted: bool = True
    groups: list[list[int]] = field(default_factory=list)

    def plan(self) -> PrunePlan:
        return PrunePlan({int(layer): list(v) for layer, v in self.victims.items()}, [list(g) for g in self.groups])


@dataclass
class PruneResult:
    model: ModelState
    spec: NetworkSpec
    records: list[IterationRecord]
    max_accuracy: float

    @property
    def accepted(self) -> list[IterationRecord]:
        return [r for r in self.records if r.accepted]


@dataclass
class _Unit:
    """A single conv layer or a residual group pruned as one."""

    members: list[int]
    ranking: list[FilterPair]
    count: int

    @property
    def pairs(self) -> list[FilterPair]:
        return self.ranking[: self.count]


def _units(spec: NetworkSpec, store: TrajectoryStore, rate: float) -> list[_Unit]:
    recorded = set(store.layers())
    eligible = set(store.eligible_layers(spec)) & recorded
    grouped = {i for g in spec.residual_groups for i in g}

    candidates = [g for g in spec.residual_groups if set(g) <= eligible]
    candidates += [[i] for i in sorted(eligible - grouped)]

    units = []
    for members in candidates:
        try:
            ranking = make_filter_pairs(store, members, rate, limit=len(members) == 1)
        except LayerIneligible as e:
            logger.debug(f"skipping {members}: {e}")
            continue
        filters = spec.layers[members[0]].filters
        units.append(_Unit(members, ranking, prune_count(rate, filters)))

    if not units:
        raise NoEligibleLayers(f"no conv layer has at least {store.threshold} filters with recorded trajectories")
    return units


def _regularizer_pairs(units: list[_Unit]) -> list[FilterPair]:
    return [
        FilterPair(member, pair.i, pair.j, pair.similarity)
        for unit in units
        for pair in unit.pairs
        for member in unit.members
    ]


def _plan(model: ModelState, units: list[_Unit]) -> PrunePlan:
    plan = PrunePlan()
    for unit in units:
        if len(unit.members) == 1:
            layer = unit.members[0]
            plan.victims.update(select_prune_filters(unit.pairs, {layer: model.params[layer]["w"]}))
            continue

        weights = [model.params[m]["w"] for m in unit.members]
        stacked = np.concatenate([w.reshape(w.shape[0], -1) for w in weights], axis=1)
        try:
            victims = enforce_group_exact(unit.ranking, stacked, unit.count)
        except InsufficientDistinctFilters as e:
            logger.warning(f"group {unit.members} left unpruned: {e}")
            continue
        plan.victims.update({m: list(victims) for m in unit.members})
        plan.groups.append(list(unit.members))
    return plan


def _record(
    iteration: int,
    accuracy: float,
    spec: NetworkSpec,
    eligible: list[int],
    plan: PrunePlan | None = None,
    before: NetworkSpec | None = None,
    *,
    accepted: bool = True,
) -> IterationRecord:
    total, trainable = count_params(spec)
    flops = count_flops(spec)
    eligible_flops = count_flops(spec, eligible)
    record = IterationRecord(iteration, accuracy, total, trainable, flops, eligible_flops, accepted=accepted)
    if plan is not None and before is not None:
        record.victims = {str(layer): victims for layer, victims in sorted(plan.victims.items())}
        record.groups = [list(g) for g in plan.groups]
        record.predicted_param_savings = count_params(before)[0] - total
        record.predicted_flop_savings = count_flops(before) - flops
    return record


def prune_loop(
    model: ModelState,
    spec: NetworkSpec,
    train_data: LabelledData,
    val_data: LabelledData,
    weights: ClassWeights,
    *,
    settings: PruneSettings | None = None,
    train_settings: TrainSettings | None = None,
    initial_store: TrajectoryStore | None = None,
) -> PruneResult:
    """
    Prune until validation accuracy drifts more than `min_diff` from its running maximum.

    :param initial_store: Trajectories from the training that produced `model`. Without them a warm-up
        pass of `epochs_each` epochs records fresh ones first.
    :return: The model of the last accepted iteration and one record per iteration, the starting
        model being iteration 0.
    """
    settings = settings or PruneSettings()
    train_settings = train_settings or TrainSettings()

    accepted_model, accepted_spec = model.copy(), spec
    max_acc = curr = evaluate_accuracy(accepted_model, accepted_spec, val_data)
    store = initial_store or TrajectoryStore(settings.eligibility_threshold)

    if abs(max_acc - curr) <= settings.min_diff and settings.max_iterations > 0 and store.epochs == 0:
        logger.info(f"recording trajectories over {settings.epochs_each} warm-up epochs")
        train(
            accepted_model,
            accepted_spec,
            train_data,
            val_data,
            epochs=settings.epochs_each,
            weights=weights,
            snapshot_store=store,
            settings=train_settings,
        )
        max_acc = curr = evaluate_accuracy(accepted_model, accepted_spec, val_data)

    # deletion never removes layers, so the starting indices stay valid
    eligible = eligible_conv_layers(spec, settings.eligibility_threshold)
    records = [_record(0, curr, accepted_spec, eligible)]
    logger.info(f"pruning from val accuracy {curr:.4f}, {records[0].total_params} params, {records[0].flops} FLOPs")

    iteration = 0
    while abs(max_acc - curr) <= settings.min_diff and iteration < settings.max_iterations:
        iteration += 1
        try:
            units = _units(accepted_spec, store, settings.rate)
        except NoEligibleLayers as e:
            logger.info(f"stopping: {e}")
            break

        iteration_settings = dataclasses.replace(train_settings, seed=train_settings.seed + iteration)
        candidate = accepted_model.copy()
        train(
            candidate,
            accepted_spec,
            train_data,
            val_data,
            epochs=settings.epochs_each,
            weights=weights,
            reg_pairs=_regularizer_pairs(units),
            settings=iteration_settings,
        )

        plan = _plan(candidate, units)
        if plan.total() == 0:
            logger.info("stopping: nothing left to prune")
            break
        candidate, candidate_spec = delete_filters(candidate, accepted_spec, plan)

        fresh = TrajectoryStore(settings.eligibility_threshold)
        train(
            candidate,
            candidate_spec,
            train_data,
            val_data,
            epochs=settings.epochs_each,
            weights=weights,
            snapshot_store=fresh,
            settings=iteration_settings,
        )
        curr = evaluate_accuracy(candidate, candidate_spec, val_data)
        passed = abs(max_acc - curr) <= settings.min_diff

        record = _record(
            iteration, curr, candidate_spec, eligible, plan, accepted_spec, accepted=passed
        )
        records.append(record)
        logger.info(
            f"iteration {iteration}: val accuracy {curr:.4f} (best {max_acc:.4f}), {record.total_params} params, "
            f"{record.flops} FLOPs, {plan.total()} filters deleted, {'kept' if passed else 'rejected'}"
        )

        if passed:
            accepted_model, accepted_spec, store = candidate, candidate_spec, fresh
            max_acc = max(max_acc, curr)

    return PruneResult(accepted_model, accepted_spec, records, max_acc)
