"""
Run configuration: a `key = value` file with dotted section prefixes, e.g.

    seed = 7
    bo.k0 = 5
    backbone.layers = conv:3:8:relu, conv:3:32:relu, pool:2:2, flatten, dense:64:relu, output

Unknown keys are rejected. See README.md for every key.
"""

from pathlib import Path
from typing import Annotated, Any, Literal

from dotenv import dotenv_values
from pydantic import AfterValidator, BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from tascforge.errors import ArchitectureInfeasible, ConfigError, InvalidConfig
from tascforge.nn.layers import ConvSpec, DenseSpec, DropoutSpec, FlattenSpec, LayerSpec, MaxPoolSpec, OutputSpec
from tascforge.nn.network import NetworkSpec
from tascforge.space import (
    ALL_ACTIVATIONS,
    CONV_FILTER_COUNTS,
    CONV_FILTER_SIZES,
    DROPOUT_RATES,
    FC_NEURONS,
    POOL_SIZES,
    Activation,
    SearchSpace,
)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


def _split_groups(value: Any) -> Any:
    if isinstance(value, str):
        return [[int(i) for i in part.split("+")] for part in _split_list(value)]
    return value


def parse_layer(token: str) -> LayerSpec:
    """
    One backbone layer:

        conv:k:filters:activation[:bn]   pool:k:stride   dense:neurons:activation[:bn]
        dropout:p                        flatten         output[:classes]
    """
    kind, *args = token.strip().split(":")
    try:
        match kind, args:
            case "conv", [k, filters, activation]:
                return ConvSpec(int(k), int(filters), Activation(activation))
            case "conv", [k, filters, activation, "bn"]:
                return ConvSpec(int(k), int(filters), Activation(activation), has_batchnorm=True)
            case "pool", [k, stride]:
                return MaxPoolSpec(int(k), int(stride))
            case "dense", [neurons, activation]:
                return DenseSpec(int(neurons), Activation(activation))
            case "dense", [neurons, activation, "bn"]:
                return DenseSpec(int(neurons), Activation(activation), has_batchnorm=True)
            case "dropout", [p]:
                return DropoutSpec(float(p))
            case "flatten", []:
                return FlattenSpec()
            case "output", []:
                return OutputSpec(0)
            case "output", [classes]:
                return OutputSpec(int(classes))
    except ValueError as e:
        raise ValueError(f"bad layer {token!r}: {e}") from e
    raise ValueError(f"bad layer {token!r}")


def _check_layers(tokens: tuple[str, ...]) -> tuple[str, ...]:
    layers = [parse_layer(t) for t in tokens]
    if not layers or not isinstance(layers[-1], OutputSpec):
        raise ValueError("backbone must end with an output layer")
    return tokens


type IntList = Annotated[tuple[int, ...], BeforeValidator(_split_list)]
type FloatList = Annotated[tuple[float, ...], BeforeValidator(_split_list)]
type ActivationList = Annotated[tuple[Activation, ...], BeforeValidator(_split_list)]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(Section):
    source: Literal["synthetic", "idx"] = "synthetic"
    classes: int = Field(4, ge=2)
    source_samples_per_class: int = Field(60, ge=2)
    target_samples_per_class: int = Field(40, ge=2)
    height: int = Field(12, ge=1)
    width: int = Field(12, ge=1)
    channels: int = Field(1, ge=1)
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    target_images: Path | None = None
    target_labels: Path | None = None

    @model_validator(mode="after")
    def _idx_paths(self) -> "DataConfig":
        if self.source == "idx" and (self.target_images is None or self.target_labels is None):
            raise ValueError("data.source = idx needs data.target_images and data.target_labels")
        return self

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


DEFAULT_BACKBONE = (
    "conv:3:8:relu",
    "conv:3:32:relu",
    "conv:3:32:relu",
    "pool:2:2",
    "flatten",
    "dense:64:relu",
    "dropout:0.3",
    "output",
)


class BackboneConfig(Section):
    layers: Annotated[tuple[str, ...], BeforeValidator(_split_list), AfterValidator(_check_layers)] = DEFAULT_BACKBONE
    residual_groups: Annotated[list[list[int]], BeforeValidator(_split_groups)] = Field(default_factory=list)
    replace_top_k_blocks: int = Field(2, ge=1)
    pretrain_epochs: int = Field(10, ge=1)

    def build(self, input_shape: tuple[int, ...], classes: int) -> NetworkSpec:
        layers = [parse_layer(t) for t in self.layers]
        if layers[-1].classes == 0:
            layers[-1] = OutputSpec(classes)
        return NetworkSpec(layers, input_shape, self.residual_groups)


class SpaceConfig(Section):
    conv_counts: IntList = (0, 1, 2, 3)
    conv_filter_sizes: IntList = CONV_FILTER_SIZES
    conv_filter_counts: IntList = CONV_FILTER_COUNTS
    conv_activations: ActivationList = ALL_ACTIVATIONS
    pool_counts: IntList = (0, 1)
    pool_sizes: IntList = POOL_SIZES
    fc_counts: IntList = (1, 2, 3)
    fc_neurons: IntList = FC_NEURONS
    fc_activations: ActivationList = ALL_ACTIVATIONS
    fc_dropouts: FloatList = DROPOUT_RATES

    def build(self) -> SearchSpace:
        return SearchSpace(**self.model_dump())


class TrainConfig(Section):
    lr: float = Field(1e-2, gt=0.0)
    batch_size: int = Field(32, ge=1)
    finetune_epochs: int = Field(10, ge=1)


class BoConfig(Section):
    k0: int = Field(5, ge=2)
    budget: int = Field(20, ge=2)
    candidates_per_step: int = Field(512, ge=1)
    proxy_epochs: int = Field(10, ge=1)
    workers: int = Field(1, ge=1)
    finetune_backbone: bool = False
    oracle_cap: int = Field(5000, ge=1)

    @model_validator(mode="after")
    def _budget_covers_design(self) -> "BoConfig":
        if self.budget < self.k0:
            raise ValueError(f"bo.budget ({self.budget}) must be at least bo.k0 ({self.k0})")
        return self


class PruneConfig(Section):
    rate: float = Field(0.05, gt=0.0, lt=1.0)
    min_diff: float = 0.02
    epochs_each: int = Field(5, ge=1)
    eligibility_threshold: int = Field(16, ge=2)
    max_iterations: int = Field(10, ge=0)


class ReportConfig(Section):
    include_baseline: bool = True


class RunConfig(Section):
    seed: int = 0
    out_dir: Path = Path("out")
    data: DataConfig = DataConfig()
    backbone: BackboneConfig = BackboneConfig()
    space: SpaceConfig = SpaceConfig()
    train: TrainConfig = TrainConfig()
    bo: BoConfig = BoConfig()
    prune: PruneConfig = PruneConfig()
    report: ReportConfig = ReportConfig()

    @model_validator(mode="after")
    def _buildable(self) -> "RunConfig":
        try:
            self.backbone_spec()
            self.space.build()
        except (ArchitectureInfeasible, InvalidConfig) as e:
            raise ValueError(str(e)) from e
        return self

    def backbone_spec(self) -> NetworkSpec:
        return self.backbone.build(self.data.input_shape, self.data.classes)


def _nest(flat: dict[str, str | None]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            raise ConfigError(f"config key {key!r} has no value")
        section, _, name = key.partition(".")
        if not name:
            nested[key] = value
            continue
        if "." in name:
            raise ConfigError(f"config key {key!r} is nested too deeply")
        target = nested.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(f"config key {section!r} is both a value and a section")
        target[name] = value
    return nested


def load_config(path: Path | None, **overrides: Any) -> RunConfig:
    """
    Parse and validate a run config. `overrides` replace top-level keys (seed, out_dir) when not None.

    :raises ConfigError: Missing file, unknown key or out-of-range value.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        raw = _nest(dotenv_values(path, interpolate=False))
    raw.update({k: v for k, v in overrides.items() if v is not None})

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e
