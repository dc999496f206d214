"""
tascforge <pretrain|tune|prune|run|oracle|report> [--config PATH] [--seed N] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 runtime/model error, 4 capacity error.
"""

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import polars as pl
from dotenv import load_dotenv
from loguru import logger

from tascforge.bo import Observation, ProxyObjective, TuneResult, exhaustive_search, tune
from tascforge.config import RunConfig, load_config
from tascforge.dataio import Dataset, Style, class_weights, generate_synthetic, load_idx, split
from tascforge.errors import CheckpointError, TascforgeError
from tascforge.logs import RecordWriter, configure_logging, read_records
from tascforge.nn.checkpoint import load_checkpoint, save_checkpoint
from tascforge.nn.heads import baseline_network, build_head, compose, truncate_backbone, unfreeze
from tascforge.nn.network import ModelState, NetworkSpec, init_model
from tascforge.nn.training import TrainSettings, evaluate_accuracy, train
from tascforge.pruning.loop import IterationRecord, PruneResult, PruneSettings, prune_loop
from tascforge.pruning.trajectory import TrajectoryStore, eligible_conv_layers
from tascforge.report import (
    StageSummary,
    iteration_frame,
    plan_report,
    render,
    summarize,
    summary_frame,
    write_frame,
)

BACKBONE_CKPT = "backbone.ckpt"
TUNED_CKPT = "tuned.ckpt"
PRUNED_CKPT = "pruned.ckpt"
SEARCH_LOG = "search.jsonl"
ORACLE_LOG = "oracle.jsonl"
PRUNE_LOG = "prune.jsonl"
SUMMARY = "summary.jsonl"


@dataclass
class Splits:
    train: Dataset
    val: Dataset


def _source(config: RunConfig) -> Splits:
    d = config.data
    data = generate_synthetic(
        d.classes, d.source_samples_per_class, d.height, d.width, d.channels, config.seed, Style.SOURCE
    )
    return Splits(*split(data, d.val_fraction, np.random.default_rng(config.seed)))


def _target(config: RunConfig) -> Splits:
    d = config.data
    if d.source == "idx":
        data = load_idx(d.target_images, d.target_labels)
    else:
        data = generate_synthetic(
            d.classes, d.target_samples_per_class, d.height, d.width, d.channels, config.seed + 1, Style.TARGET
        )
    return Splits(*split(data, d.val_fraction, np.random.default_rng(config.seed + 1)))


def _train_settings(config: RunConfig, seed_offset: int = 0) -> TrainSettings:
    return TrainSettings(lr=config.train.lr, batch_size=config.train.batch_size, seed=config.seed + seed_offset)


def _load(path: Path) -> tuple[ModelState, NetworkSpec]:
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


# stages


def pretrain_stage(config: RunConfig) -> tuple[ModelState, NetworkSpec, float]:
    source = _source(config)
    spec = config.backbone_spec()
    model = init_model(spec, config.seed)

    epochs = config.backbone.pretrain_epochs
    logger.info(f"pretraining backbone on {len(source.train)} source samples for {epochs} epochs")
    result = train(
        model,
        spec,
        source.train,
        source.val,
        epochs=epochs,
        weights=class_weights(source.train),
        settings=_train_settings(config),
    )
    RecordWriter(config.out_dir / "pretrain.jsonl").write_all(result.log)
    save_checkpoint(config.out_dir / BACKBONE_CKPT, model, spec)

    accuracy = evaluate_accuracy(model, spec, source.val)
    logger.info(f"backbone source val accuracy {accuracy:.4f} (best {result.best_val_accuracy:.4f})")
    return model, spec, accuracy


def baseline_stage(config: RunConfig, backbone: ModelState, backbone_spec: NetworkSpec) -> tuple[NetworkSpec, float]:
    """The backbone's own top layers retrained on the target data."""
    target = _target(config)
    spec, model = baseline_network(
        backbone_spec, backbone, target.train.class_count, config.backbone.replace_top_k_blocks, config.seed
    )
    train(
        model,
        spec,
        target.train,
        target.val,
        epochs=config.bo.proxy_epochs,
        weights=class_weights(target.train),
        settings=_train_settings(config),
    )
    accuracy = evaluate_accuracy(model, spec, target.val)
    logger.info(f"transfer-learning baseline: target val accuracy {accuracy:.4f}")
    return spec, accuracy


@dataclass
class TuneOutcome:
    search: TuneResult
    model: ModelState
    spec: NetworkSpec
    store: TrajectoryStore
    accuracy: float


def tune_stage(config: RunConfig, backbone: ModelState, backbone_spec: NetworkSpec) -> TuneOutcome:
    target = _target(config)
    weights = class_weights(target.train)
    trunk_spec, trunk = truncate_backbone(backbone_spec, backbone, config.backbone.replace_top_k_blocks)
    logger.info(f"backbone truncated to {len(trunk_spec.layers)} layers, features {trunk_spec.output_shape}")

    objective = ProxyObjective(
        trunk_spec,
        trunk,
        target.train,
        target.val,
        weights,
        config.bo.proxy_epochs,
        _train_settings(config),
        finetune_backbone=config.bo.finetune_backbone,
    )
    writer = RecordWriter(config.out_dir / SEARCH_LOG)
    search = tune(
        objective,
        config.space.build(),
        k0=config.bo.k0,
        m_total=config.bo.budget,
        seed=config.seed,
        epoch_budget=config.bo.proxy_epochs,
        candidates_per_step=config.bo.candidates_per_step,
        workers=config.bo.workers,
        on_observation=writer.write,
    )
    (config.out_dir / "best_config.json").write_text(search.best.config.to_json(indent=2))

    head_spec = build_head(search.best.config, trunk_spec.output_shape, target.train.class_count)
    spec, model = compose(unfreeze(trunk_spec), trunk, head_spec, init_model(head_spec, config.seed))
    store = TrajectoryStore(config.prune.eligibility_threshold)
    logger.info(f"finetuning backbone + best head for {config.train.finetune_epochs} epochs")
    result = train(
        model,
        spec,
        target.train,
        target.val,
        epochs=config.train.finetune_epochs,
        weights=weights,
        snapshot_store=store,
        settings=_train_settings(config),
    )
    RecordWriter(config.out_dir / "finetune.jsonl").write_all(result.log)
    save_checkpoint(config.out_dir / TUNED_CKPT, model, spec)

    accuracy = evaluate_accuracy(model, spec, target.val)
    logger.info(f"tuned model target val accuracy {accuracy:.4f}")
    return TuneOutcome(search, model, spec, store, accuracy)


def prune_stage(
    config: RunConfig,
    model: ModelState,
    spec: NetworkSpec,
    store: TrajectoryStore | None = None,
) -> PruneResult:
    target = _target(config)
    p = config.prune
    result = prune_loop(
        model,
        spec,
        target.train,
        target.val,
        class_weights(target.train),
        settings=PruneSettings(p.rate, p.min_diff, p.epochs_each, p.eligibility_threshold, p.max_iterations),
        train_settings=_train_settings(config, seed_offset=1000),
        initial_store=store,
    )
    RecordWriter(config.out_dir / PRUNE_LOG).write_all(result.records)
    save_checkpoint(config.out_dir / PRUNED_CKPT, result.model, result.spec)
    logger.info(f"pruning kept {len(result.accepted) - 1} iteration(s)")
    return result


# commands


def cmd_pretrain(config: RunConfig, _args: argparse.Namespace):
    pretrain_stage(config)


def cmd_tune(config: RunConfig, args: argparse.Namespace):
    backbone, spec = _load(args.backbone or config.out_dir / BACKBONE_CKPT)
    tune_stage(config, backbone, spec)


def cmd_prune(config: RunConfig, args: argparse.Namespace):
    model, spec = _load(args.model or config.out_dir / TUNED_CKPT)
    prune_stage(config, model, spec)


def cmd_run(config: RunConfig, _args: argparse.Namespace):
    backbone, backbone_spec, _ = pretrain_stage(config)
    baseline = baseline_stage(config, backbone, backbone_spec) if config.report.include_baseline else None
    tuned = tune_stage(config, backbone, backbone_spec)
    pruned = prune_stage(config, tuned.model, tuned.spec, tuned.store)

    # FLOP reductions are relative to the tuned, unpruned model. Pruning keeps layer indices,
    # so the pruned row is measured over the tuned model's eligible layers.
    threshold = config.prune.eligibility_threshold
    eligible = eligible_conv_layers(tuned.spec, threshold)
    reference = summarize("tuned", tuned.spec, tuned.accuracy, eligible)
    rows: list[StageSummary] = []
    if baseline is not None:
        baseline_spec, baseline_accuracy = baseline
        eligible_in_baseline = eligible_conv_layers(baseline_spec, threshold)
        rows.append(summarize("baseline", baseline_spec, baseline_accuracy, eligible_in_baseline, reference))
    rows.append(reference)
    rows.append(summarize("pruned", pruned.spec, pruned.accepted[-1].val_accuracy, eligible, reference))

    frame = summary_frame(rows)
    write_frame(frame, config.out_dir / SUMMARY)
    print(render(frame))  # noqa: T201


def cmd_oracle(config: RunConfig, args: argparse.Namespace):
    backbone, spec = _load(args.backbone or config.out_dir / BACKBONE_CKPT)
    target = _target(config)
    trunk_spec, trunk = truncate_backbone(spec, backbone, config.backbone.replace_top_k_blocks)
    objective = ProxyObjective(
        trunk_spec,
        trunk,
        target.train,
        target.val,
        class_weights(target.train),
        config.bo.proxy_epochs,
        _train_settings(config),
        finetune_backbone=config.bo.finetune_backbone,
    )
    writer = RecordWriter(config.out_dir / ORACLE_LOG)
    result = exhaustive_search(
        objective,
        config.space.build(),
        cap=config.bo.oracle_cap,
        seed=config.seed,
        epoch_budget=config.bo.proxy_epochs,
        on_observation=writer.write,
    )
    (config.out_dir / "oracle_best.json").write_text(result.best.to_json(indent=2))
    logger.info(f"oracle best of {len(result.history)}: {result.best.config.describe()} ({result.best.accuracy:.4f})")


def cmd_report(config: RunConfig, _args: argparse.Namespace):
    out = config.out_dir
    shown = False
    if (out / SUMMARY).is_file():
        print(render(pl.read_ndjson(out / SUMMARY)))  # noqa: T201
        shown = True
    if (out / PRUNE_LOG).is_file():
        records = read_records(out / PRUNE_LOG, IterationRecord)
        print(render(iteration_frame(records)))  # noqa: T201
        print(plan_report(records))  # noqa: T201
        shown = True
    if (out / SEARCH_LOG).is_file():
        history = read_records(out / SEARCH_LOG, Observation)
        best = max(history, key=lambda o: (o.accuracy, -o.index))
        print(f"search: {len(history)} observations, best {best.accuracy:.4f} {best.config.describe()}")  # noqa: T201
        shown = True
    if not shown:
        raise TascforgeError(f"nothing to report in {out}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "tune": cmd_tune,
    "prune": cmd_prune,
    "run": cmd_run,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file (key = value, dotted sections)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="override the output directory")

    parser = argparse.ArgumentParser(prog="tascforge", description="Target-aware CNN head search and filter pruning")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("pretrain", parents=[common], help="train the backbone on the source dataset")
    tune_parser = commands.add_parser("tune", parents=[common], help="search the head space")
    tune_parser.add_argument("--backbone", type=Path, help="backbone checkpoint (default OUT/backbone.ckpt)")
    prune_parser = commands.add_parser("prune", parents=[common], help="prune a tuned model")
    prune_parser.add_argument("--model", type=Path, help="model checkpoint (default OUT/tuned.ckpt)")
    commands.add_parser("run", parents=[common], help="pretrain, tune, prune and report")
    oracle_parser = commands.add_parser("oracle", parents=[common], help="evaluate every config of a small space")
    oracle_parser.add_argument("--backbone", type=Path, help="backbone checkpoint (default OUT/backbone.ckpt)")
    commands.add_parser("report", parents=[common], help="print the tables of a finished run")
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, seed=args.seed, out_dir=args.out)
        config.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](config, args)
    except TascforgeError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    return 0
