"""Summary tables: accuracy, parameters and remaining FLOPs per stage, and the per-iteration pruning log."""

from dataclasses import dataclass
from pathlib import Path

import dataclasses_json
import polars as pl

from tascforge.nn.accounting import count_flops, count_params
from tascforge.nn.network import NetworkSpec
from tascforge.pruning.loop import IterationRecord


@dataclasses_json.dataclass_json
@dataclass
class StageSummary:
    stage: str
    val_accuracy: float
    total_params: int
    trainable_params: int
    flops: int
    eligible_flops: int
    flop_reduction: float = 0.0
    eligible_flop_reduction: float = 0.0


def summarize(
    stage: str,
    spec: NetworkSpec,
    val_accuracy: float,
    eligible: list[int],
    reference: StageSummary | None = None,
) -> StageSummary:
    """
    One summary row. `eligible` are the prunable conv layers of `spec`; both reductions are
    1 - remaining/reference, over all layers and over the eligible ones.
    """
    total, trainable = count_params(spec)
    flops = count_flops(spec)
    eligible_flops = count_flops(spec, eligible)
    row = StageSummary(stage, val_accuracy, total, trainable, flops, eligible_flops)
    if reference is not None and reference.flops:
        row.flop_reduction = 1.0 - flops / reference.flops
    if reference is not None and reference.eligible_flops:
        row.eligible_flop_reduction = 1.0 - eligible_flops / reference.eligible_flops
    return row


def summary_frame(rows: list[StageSummary]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "stage": [r.stage for r in rows],
            "val_accuracy": [r.val_accuracy for r in rows],
            "total_params": [r.total_params for r in rows],
            "trainable_params": [r.trainable_params for r in rows],
            "flops": [r.flops for r in rows],
            "eligible_flops": [r.eligible_flops for r in rows],
            "flop_reduction": [r.flop_reduction for r in rows],
            "eligible_flop_reduction": [r.eligible_flop_reduction for r in rows],
        }
    )


def iteration_frame(records: list[IterationRecord]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "iteration": [r.iteration for r in records],
            "val_accuracy": [r.val_accuracy for r in records],
            "total_params": [r.total_params for r in records],
            "trainable_params": [r.trainable_params for r in records],
            "flops": [r.flops for r in records],
            "eligible_flops": [r.eligible_flops for r in records],
            "victims": ["; ".join(f"{layer}:{v}" for layer, v in r.victims.items()) for r in records],
            "param_savings": [r.predicted_param_savings for r in records],
            "flop_savings": [r.predicted_flop_savings for r in records],
            "accepted": [r.accepted for r in records],
        },
        schema_overrides={"victims": pl.String},
    )


def render(frame: pl.DataFrame) -> str:
    """Aligned text table with every row and column shown."""
    with pl.Config(tbl_rows=-1, tbl_cols=-1, tbl_width_chars=200, fmt_str_lengths=80, tbl_hide_dataframe_shape=True):
        return str(frame)


def write_frame(frame: pl.DataFrame, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.write_ndjson(path)


def plan_report(records: list[IterationRecord]) -> str:
    """Per-iteration deletions with their predicted savings, one indented line per layer."""
    lines = []
    for r in records:
        plan = r.plan()
        if plan.total() == 0:
            continue
        lines.append(
            f"iteration {r.iteration} ({'kept' if r.accepted else 'rejected'}): {plan.total()} filters, "
            f"predicted savings {r.predicted_param_savings} params / {r.predicted_flop_savings} FLOPs"
        )
        lines.extend(f"  {line}" for line in plan.describe())
    return "\n".join(lines)
