import json
from pathlib import Path

import pytest

from tascforge import main
from tascforge.cli import BACKBONE_CKPT, PRUNE_LOG, PRUNED_CKPT, SEARCH_LOG, SUMMARY, TUNED_CKPT
from tascforge.logs import read_records
from tascforge.nn.accounting import count_flops
from tascforge.nn.checkpoint import load_checkpoint
from tascforge.pruning.loop import IterationRecord

TINY = """
seed = 3
data.classes = 3
data.source_samples_per_class = 10
data.target_samples_per_class = 10
data.height = 8
data.width = 8
backbone.layers = conv:3:16:relu, pool:2:2, flatten, dense:16:relu, output
backbone.replace_top_k_blocks = 2
backbone.pretrain_epochs = 1
space.conv_counts = 0
space.pool_counts = 0
space.fc_counts = 1
space.fc_neurons = 64, 128
space.fc_activations = relu
space.fc_dropouts = 0.1, 0.5
train.finetune_epochs = 1
bo.k0 = 2
bo.budget = 3
bo.proxy_epochs = 1
bo.oracle_cap = 2
prune.epochs_each = 1
prune.eligibility_threshold = 8
prune.max_iterations = 1
"""


@pytest.fixture
def tiny(tmp_path) -> tuple[Path, Path]:
    config = tmp_path / "tiny.conf"
    config.write_text(TINY)
    return config, tmp_path / "out"


def test_bad_config_exits_2(tmp_path):
    config = tmp_path / "bad.conf"
    config.write_text("nonsense.key = 1\n")
    assert main(["pretrain", "--config", str(config), "--out", str(tmp_path / "out")]) == 2


def test_missing_checkpoint_exits_3(tiny):
    config, out = tiny
    assert main(["prune", "--config", str(config), "--out", str(out)]) == 3
    assert main(["tune", "--config", str(config), "--out", str(out), "--backbone", str(out / "nope.ckpt")]) == 3


def test_empty_report_exits_3(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 3


def test_pretrain_then_oracle_over_cap_exits_4(tiny):
    config, out = tiny
    assert main(["pretrain", "--config", str(config), "--out", str(out)]) == 0
    assert (out / BACKBONE_CKPT).is_file()
    assert main(["oracle", "--config", str(config), "--out", str(out)]) == 4


@pytest.mark.slow
def test_run_and_report(tiny, capsys):
    config, out = tiny
    assert main(["run", "--config", str(config), "--out", str(out)]) == 0

    for name in (BACKBONE_CKPT, TUNED_CKPT, PRUNED_CKPT, SEARCH_LOG, PRUNE_LOG, SUMMARY, "best_config.json"):
        assert (out / name).is_file(), name

    assert len((out / SEARCH_LOG).read_text().splitlines()) == 3
    stages = [json.loads(line)["stage"] for line in (out / SUMMARY).read_text().splitlines()]
    assert stages == ["baseline", "tuned", "pruned"]

    records = read_records(out / PRUNE_LOG, IterationRecord)
    accepted = [r for r in records if r.accepted]
    model, spec = load_checkpoint(out / PRUNED_CKPT)
    assert count_flops(spec) == accepted[-1].flops
    assert len(model.params) == len(spec.layers)

    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    assert "search: 3 observations" in capsys.readouterr().out


@pytest.mark.slow
def test_oracle_enumerates_small_space(tiny):
    config, out = tiny
    config.write_text(TINY.replace("bo.oracle_cap = 2", "bo.oracle_cap = 10"))
    assert main(["pretrain", "--config", str(config), "--out", str(out)]) == 0
    assert main(["oracle", "--config", str(config), "--out", str(out)]) == 0
    assert len((out / "oracle.jsonl").read_text().splitlines()) == 4
    assert (out / "oracle_best.json").is_file()


def test_space_values_outside_the_table_exit_2(tmp_path):
    config = tmp_path / "bad.conf"
    config.write_text(TINY.replace("space.fc_dropouts = 0.1, 0.5", "space.fc_dropouts = 0.1, 1.0"))
    assert main(["tune", "--config", str(config), "--out", str(tmp_path / "out")]) == 2


@pytest.mark.slow
def test_same_seed_runs_are_identical(tiny):
    config, out = tiny
    first, second = out / "first", out / "second"
    assert main(["run", "--config", str(config), "--out", str(first)]) == 0
    assert main(["run", "--config", str(config), "--out", str(second)]) == 0

    for name in (SEARCH_LOG, PRUNE_LOG, "best_config.json", BACKBONE_CKPT, TUNED_CKPT, PRUNED_CKPT):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
