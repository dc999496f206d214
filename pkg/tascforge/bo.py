"""
Head search: a random initial design, then one GP-guided proposal at a time.

Each step refits the kernel hyperparameters and the GP on every observation so far and evaluates
the candidate with the highest Expected Improvement.
"""

import asyncio
import dataclasses
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Protocol

import dataclasses_json
import numpy as np
from loguru import logger

from tascforge.dataio import Dataset
from tascforge.errors import EmptyCandidatePool, TascforgeError
from tascforge.gp import GPModel, expected_improvement, fit, optimize_hyperparams, posterior_batch
from tascforge.nn.heads import build_head, compose, unfreeze
from tascforge.nn.losses import ClassWeights
from tascforge.nn.network import ModelState, NetworkSpec, init_model
from tascforge.nn.training import TrainSettings, predict, train
from tascforge.space import HeadConfig, SearchSpace, encode, enumerate_space, sample_uniform, space_size

UNEXPLORED_ENUMERATION_CAP = 100_000
DESIGN_ATTEMPTS_PER_POINT = 100


@dataclasses_json.dataclass_json
@dataclass
class Observation:
    index: int
    config: HeadConfig
    point: list[float]
    accuracy: float
    epoch_budget: int
    wall_seconds: float = field(default=0.0, metadata=dataclasses_json.config(exclude=lambda _: True))


@dataclass
class TuneResult:
    best: Observation
    history: list[Observation]
    k0: int
    total_budget: int


class Objective(Protocol):
    def __call__(self, config: HeadConfig, seed: int) -> float: ...


@dataclass
class ProxyObjective:
    """
    Validation accuracy of a head trained on top of the truncated backbone.

    With a frozen backbone the head trains on backbone features computed once up front.
    """

    backbone_spec: NetworkSpec
    backbone: ModelState
    train_data: Dataset
    val_data: Dataset
    weights: ClassWeights
    epochs: int
    settings: TrainSettings = field(default_factory=TrainSettings)
    finetune_backbone: bool = False
    _train_features: Dataset | None = field(default=None, init=False, repr=False)
    _val_features: Dataset | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.finetune_backbone:
            self._train_features = self.train_data.with_images(
                predict(self.backbone, self.backbone_spec, self.train_data.images)
            )
            self._val_features = self.val_data.with_images(
                predict(self.backbone, self.backbone_spec, self.val_data.images)
            )

    def head_spec(self, config: HeadConfig) -> NetworkSpec:
        return build_head(config, self.backbone_spec.output_shape, self.train_data.class_count)

    def evaluate_config(self, config: HeadConfig, seed: int) -> float:
        head_spec = self.head_spec(config)
        head = init_model(head_spec, seed)
        settings = dataclasses.replace(self.settings, seed=seed)

        if self.finetune_backbone:
            spec, model = compose(unfreeze(self.backbone_spec), self.backbone.copy(), head_spec, head)
            result = train(
                model, spec, self.train_data, self.val_data, epochs=self.epochs, weights=self.weights, settings=settings
            )
        else:
            result = train(
                head,
                head_spec,
                self._train_features,
                self._val_features,
                epochs=self.epochs,
                weights=self.weights,
                settings=settings,
            )
        return result.best_val_accuracy

    def __call__(self, config: HeadConfig, seed: int) -> float:
        return self.evaluate_config(config, seed)


def _observe(objective: Objective, config: HeadConfig, space: SearchSpace, index: int, seed: int, budget: int):
    start = time.perf_counter()
    try:
        accuracy = float(objective(config, seed))
    except TascforgeError as e:
        logger.warning(f"evaluation {index} ({config.describe()}) failed, scoring 0: {e}")
        accuracy = 0.0
    if not 0.0 <= accuracy <= 1.0:
        logger.warning(f"evaluation {index} returned accuracy {accuracy}, clamping to [0, 1]")
        accuracy = min(max(accuracy, 0.0), 1.0) if np.isfinite(accuracy) else 0.0
    point = encode(space, config).tolist()
    return Observation(index, config, point, accuracy, budget, time.perf_counter() - start)


def _initial_design(space: SearchSpace, k0: int, rng: np.random.Generator) -> list[HeadConfig]:
    design: list[HeadConfig] = []
    seen: set[tuple] = set()
    for _ in range(k0 * DESIGN_ATTEMPTS_PER_POINT):
        if len(design) == k0:
            break
        config = sample_uniform(space, rng)
        if config.key() not in seen:
            seen.add(config.key())
            design.append(config)
    if len(design) < k0:
        logger.warning(f"only found {len(design)} distinct configs for an initial design of {k0}")
    return design


async def _evaluate_design(
    objective: Objective,
    space: SearchSpace,
    design: list[HeadConfig],
    seed: int,
    budget: int,
    workers: int,
) -> list[Observation]:
    semaphore = asyncio.Semaphore(workers)

    async def one(index: int, config: HeadConfig) -> Observation:
        async with semaphore:
            return await asyncio.to_thread(_observe, objective, config, space, index, seed + index, budget)

    return await asyncio.gather(*[one(i, config) for i, config in enumerate(design)])


def propose_next(
    model: GPModel,
    f_best: float,
    space: SearchSpace,
    candidates_per_step: int,
    rng: np.random.Generator,
    evaluated: set[tuple] | None = None,
) -> HeadConfig:
    """
    The EI-argmax among `candidates_per_step` uniform samples not yet evaluated; ties go to the
    earliest sample.

    :raises EmptyCandidatePool: Every sample was already evaluated.
    """
    evaluated = evaluated or set()
    candidates: list[HeadConfig] = []
    keys: set[tuple] = set()
    for _ in range(candidates_per_step):
        config = sample_uniform(space, rng)
        key = config.key()
        if key not in evaluated and key not in keys:
            keys.add(key)
            candidates.append(config)

    if not candidates:
        raise EmptyCandidatePool(f"all {candidates_per_step} sampled candidates were already evaluated")

    points = np.stack([encode(space, c) for c in candidates])
    mu, var = posterior_batch(model, points)
    ei = expected_improvement(mu, var, f_best)
    best = int(np.argmax(ei))
    logger.debug(f"{len(candidates)} candidates, best EI {ei[best]:.5f} mu={mu[best]:.4f} var={var[best]:.3e}")
    return candidates[best]


def _unexplored(space: SearchSpace, rng: np.random.Generator, evaluated: set[tuple]) -> HeadConfig | None:
    """A uniformly chosen config not yet evaluated, or None when the space is exhausted."""
    if space_size(space) <= UNEXPLORED_ENUMERATION_CAP:
        remaining = [c for c in enumerate_space(space, UNEXPLORED_ENUMERATION_CAP) if c.key() not in evaluated]
        return remaining[int(rng.integers(len(remaining)))] if remaining else None
    for _ in range(UNEXPLORED_ENUMERATION_CAP):
        config = sample_uniform(space, rng)
        if config.key() not in evaluated:
            return config
    return None


def _next_config(
    history: list[Observation],
    space: SearchSpace,
    candidates_per_step: int,
    rng: np.random.Generator,
    evaluated: set[tuple],
) -> HeadConfig | None:
    # kernel hyperparameters need two observations
    if len(history) < 2:  # noqa: PLR2004
        return _unexplored(space, rng, evaluated)

    x = np.array([o.point for o in history])
    y = np.array([o.accuracy for o in history])
    model = fit(x, y, optimize_hyperparams(x, y))
    try:
        return propose_next(model, float(np.max(y)), space, candidates_per_step, rng, evaluated)
    except EmptyCandidatePool:
        return _unexplored(space, rng, evaluated)


def _best(history: list[Observation]) -> Observation:
    return max(history, key=lambda o: (o.accuracy, -o.index))


def tune(
    objective: Objective,
    space: SearchSpace,
    *,
    k0: int,
    m_total: int,
    seed: int,
    epoch_budget: int,
    candidates_per_step: int = 512,
    workers: int = 1,
    on_observation: Callable[[Observation], None] | None = None,
) -> TuneResult:
    """
    Search the head space for the config with the best validation accuracy.

    Observation i is evaluated with seed `seed + i`, so the whole history is reproducible from `seed`.
    Configs whose evaluation raises score 0 and the search goes on.
    """
    if k0 < 2:  # noqa: PLR2004
        raise ValueError(f"the initial design needs at least 2 points, got {k0}")
    if m_total < k0:
        raise ValueError(f"total budget {m_total} is smaller than the initial design {k0}")

    rng = np.random.default_rng(seed)
    history: list[Observation] = []

    def record(observation: Observation):
        history.append(observation)
        logger.info(
            f"observation {observation.index}: accuracy {observation.accuracy:.4f} "
            f"in {observation.wall_seconds:.1f}s, {observation.config.describe()}"
        )
        if on_observation is not None:
            on_observation(observation)

    design = _initial_design(space, k0, rng)
    for observation in asyncio.run(_evaluate_design(objective, space, design, seed, epoch_budget, workers)):
        record(observation)

    evaluated = {o.config.key() for o in history}
    size = space_size(space)
    while len(history) < m_total:
        config = None
        if len(evaluated) < size:
            config = _next_config(history, space, candidates_per_step, rng, evaluated)
        if config is None:
            logger.info(f"search space exhausted after {len(history)} observations")
            break

        index = len(history)
        record(_observe(objective, config, space, index, seed + index, epoch_budget))
        evaluated.add(config.key())

    best = _best(history)
    logger.info(f"best config after {len(history)} observations: {best.config.describe()} ({best.accuracy:.4f})")
    return TuneResult(best, history, k0, m_total)


def exhaustive_search(
    objective: Objective,
    space: SearchSpace,
    *,
    cap: int,
    seed: int,
    epoch_budget: int,
    on_observation: Callable[[Observation], None] | None = None,
) -> TuneResult:
    """Evaluate every config of a small space. Raises SpaceTooLarge beyond `cap`."""
    history: list[Observation] = []
    for index, config in enumerate(enumerate_space(space, cap)):
        observation = _observe(objective, config, space, index, seed + index, epoch_budget)
        history.append(observation)
        if on_observation is not None:
            on_observation(observation)
    if not history:
        raise EmptyCandidatePool("the search space is empty")
    return TuneResult(_best(history), history, len(history), len(history))
