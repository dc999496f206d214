"""
Filter trajectories: each filter's weights after every recorded epoch, flattened row-major
(H×W×C) and concatenated in epoch order.
"""

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from tascforge.errors import InconsistentShapes, LayerIneligible, ShapeMismatch, ZeroNormVector
from tascforge.nn.layers import ConvSpec
from tascforge.nn.network import ModelState, NetworkSpec
from tascforge.tensor import Tensor, dot, l2_norm


def cosine_similarity(u: Tensor, v: Tensor) -> float:
    """(u·v)/(‖u‖‖v‖), clamped to [-1, 1]."""
    nu, nv = l2_norm(u), l2_norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormVector("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(dot(u, v) / (nu * nv), -1.0, 1.0))


def build_trajectories(snapshots: Sequence[Tensor]) -> Tensor:
    """
    :param snapshots: One `(F, k, k, C)` weight tensor per epoch, oldest first.
    :return: `(F, N·k·k·C)`, row f being filter f's trajectory.
    """
    if not snapshots:
        raise InconsistentShapes("no epochs recorded")
    shape = snapshots[0].shape
    if any(s.shape != shape for s in snapshots):
        raise InconsistentShapes(f"filter shapes change across epochs: {[s.shape for s in snapshots]}")
    filters = shape[0]
    return np.concatenate([s.reshape(filters, -1) for s in snapshots], axis=1)


def similarity_matrix(trajectories: Tensor) -> Tensor:
    """Symmetric (F, F) matrix of trajectory cosines. Zero-norm rows raise ZeroNormVector."""
    norms = np.linalg.norm(trajectories, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormVector(f"filters {np.flatnonzero(norms == 0.0).tolist()} have zero-norm trajectories")
    unit = trajectories / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def eligible_conv_layers(spec: NetworkSpec, threshold: int) -> list[int]:
    """Conv layers with at least `threshold` filters (and never fewer than 2)."""
    return [
        i
        for i, layer in enumerate(spec.layers)
        if isinstance(layer, ConvSpec) and layer.filters >= max(2, threshold)
    ]


@dataclass
class TrajectoryStore:
    """
    Per-epoch snapshots of every eligible conv layer's filters.

    A conv layer is eligible when it has at least `threshold` filters.
    """

    threshold: int = 16
    snapshots: dict[int, list[Tensor]] = field(default_factory=dict)

    def eligible_layers(self, spec: NetworkSpec) -> list[int]:
        return eligible_conv_layers(spec, self.threshold)

    def record(self, model: ModelState, spec: NetworkSpec):
        for i in self.eligible_layers(spec):
            self.snapshots.setdefault(i, []).append(np.copy(model.params[i]["w"]))

    @property
    def epochs(self) -> int:
        return min((len(s) for s in self.snapshots.values()), default=0)

    def layers(self) -> list[int]:
        return sorted(self.snapshots)

    def trajectories(self, layer: int) -> Tensor:
        if layer not in self.snapshots:
            raise LayerIneligible(f"no snapshots recorded for layer {layer}")
        return build_trajectories(self.snapshots[layer])

    def group_trajectories(self, layers: Sequence[int]) -> Tensor:
        """Member trajectories of a residual group concatenated per filter index."""
        parts = [self.trajectories(i) for i in layers]
        if len({p.shape[0] for p in parts}) != 1:
            raise ShapeMismatch(f"group layers {list(layers)} have different filter counts")
        return np.concatenate(parts, axis=1)

    def final_weights(self, layer: int) -> Tensor:
        if layer not in self.snapshots:
            raise LayerIneligible(f"no snapshots recorded for layer {layer}")
        return self.snapshots[layer][-1]
