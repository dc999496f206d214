from dataclasses import dataclass

import numpy as np
from loguru import logger

from tascforge.errors import ShapeMismatch
from tascforge.tensor import Tensor

PROBABILITY_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, w_k = 1/N_k for the training split."""

    w: Tensor

    @classmethod
    def uniform(cls, classes: int) -> "ClassWeights":
        return cls(np.ones(classes))


@dataclass(frozen=True)
class FilterPair:
    """Two filters of one conv layer, i < j, with the cosine similarity of their trajectories."""

    layer: int
    i: int
    j: int
    similarity: float

    def __post_init__(self):
        if self.i >= self.j:
            raise ValueError(f"filter pair indices must satisfy i < j, got ({self.i}, {self.j})")


def _check_targets(probs: Tensor, labels_onehot: Tensor, weights: ClassWeights):
    if probs.shape != labels_onehot.shape or probs.ndim != 2:  # noqa: PLR2004
        raise ShapeMismatch(f"probabilities {probs.shape} and labels {labels_onehot.shape} differ")
    if weights.w.shape[0] != probs.shape[1]:
        raise ShapeMismatch(f"{weights.w.shape[0]} class weights for {probs.shape[1]} classes")


def weighted_cross_entropy(probs: Tensor, labels_onehot: Tensor, weights: ClassWeights) -> float:
    """Mean over the batch of Σ_k w_k (-y_k log ŷ_k)."""
    _check_targets(probs, labels_onehot, weights)
    clipped = np.clip(probs, PROBABILITY_FLOOR, 1.0)
    per_sample = -np.sum(weights.w * labels_onehot * np.log(clipped), axis=1)
    return float(np.mean(per_sample))


def weighted_cross_entropy_grad(probs: Tensor, labels_onehot: Tensor, weights: ClassWeights) -> Tensor:
    """Gradient of the weighted cross-entropy with respect to the softmax logits."""
    _check_targets(probs, labels_onehot, weights)
    weighted = weights.w * labels_onehot
    return (probs * weighted.sum(axis=1, keepdims=True) - weighted) / probs.shape[0]


def similarity_regularizer(
    filters: dict[int, Tensor],
    pairs: list[FilterPair],
) -> tuple[float, dict[int, Tensor]]:
    """
    R = exp(-Σ cos(F_i, F_j)) over the selected pairs, evaluated on the current filter weights.

    :param filters: layer index -> conv weights `(F, k, k, C)`.
    :param pairs: The pairs to pull together.
    :return: R and, per layer, dR/dW with the layer's weight shape.
    """
    cos_total = 0.0
    partials: list[tuple[FilterPair, Tensor, Tensor]] = []

    for pair in pairs:
        w = filters[pair.layer]
        u, v = w[pair.i].ravel(), w[pair.j].ravel()
        if u.shape != v.shape:
            raise ShapeMismatch(f"paired filters of layer {pair.layer} differ in length")
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0.0 or nv == 0.0:
            logger.warning(f"zero-norm filter in pair {pair.layer}:({pair.i}, {pair.j}); treating its cosine as 0")
            continue
        cos = float(u @ v) / (nu * nv)
        cos_total += cos
        dcos_du = v / (nu * nv) - cos * u / (nu * nu)
        dcos_dv = u / (nu * nv) - cos * v / (nv * nv)
        partials.append((pair, dcos_du, dcos_dv))

    r = float(np.exp(-cos_total))

    grads = {layer: np.zeros_like(w) for layer, w in filters.items()}
    for pair, dcos_du, dcos_dv in partials:
        g = grads[pair.layer]
        g[pair.i] -= r * dcos_du.reshape(g.shape[1:])
        g[pair.j] -= r * dcos_dv.reshape(g.shape[1:])

    return r, grads
