"""Triplet, adversarial triplet, classification and combined objectives."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import EncoderWeights
from .errors import ConfigError, ContractError
from .prompt import DEFAULT_TAU, ModelMode, PromptParams, similarity_logits

DEFAULT_MARGIN = 0.2


@dataclass
class QuadDeltas:
    """Four delta tokens from two classes (1, 2) under two augmentations (A, B)."""

    d1a: T.Tensor
    d1b: T.Tensor
    d2a: T.Tensor
    d2b: T.Tensor
    class_1: int | None = None
    class_2: int | None = None
    kind_a: object = None
    kind_b: object = None

    def validate(self) -> None:
        if self.class_1 is not None and self.class_1 == self.class_2:
            raise ContractError("quad needs two distinct classes")
        if self.kind_a is not None and self.kind_a == self.kind_b:
            raise ContractError("quad needs two distinct augmentation kinds")
        if len({t.shape for t in (self.d1a, self.d1b, self.d2a, self.d2b)}) != 1:
            raise ContractError("quad tokens differ in dimension")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 1.0
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.margin < 0:
            raise ConfigError("alpha, beta and margin must be non-negative")
        if self.alpha + self.beta <= 0:
            raise ConfigError("alpha + beta must be positive")


def triplet(anchor: T.Tensor, positive: T.Tensor, negative: T.Tensor, m: float = DEFAULT_MARGIN) -> T.Tensor:
    """max(0, d(a, p) - d(a, n) + m)."""
    if m < 0:
        raise ContractError("margin must be non-negative")
    if not anchor.shape == positive.shape == negative.shape:
        raise ContractError("triplet arguments differ in dimension")
    gap = T.sub(T.euclidean_distance(anchor, positive), T.euclidean_distance(anchor, negative))
    return T.relu(T.add(gap, T.Tensor(m)))


def adtriplet(q: QuadDeltas, m: float = DEFAULT_MARGIN, anchors: str = "default") -> T.Tensor:
    """Two-anchor adversarial triplet over a quad.

    Positives share the augmentation, negatives share the class. The default
    anchors are 1A and 2B; ``anchors="symmetric"`` uses 1B and 2A instead.
    """
    q.validate()
    if anchors == "default":
        return T.add(triplet(q.d1a, q.d2a, q.d1b, m), triplet(q.d2b, q.d1b, q.d2a, m))
    if anchors == "symmetric":
        return T.add(triplet(q.d1b, q.d2b, q.d1a, m), triplet(q.d2a, q.d1a, q.d2b, m))
    raise ConfigError(f"unknown anchor setting {anchors!r}")


def conventional_triplet_objective(q: QuadDeltas, m: float = DEFAULT_MARGIN) -> T.Tensor:
    """Class-clustering ablation: same anchors, positive shares the class."""
    q.validate()
    return T.add(triplet(q.d1a, q.d1b, q.d2a, m), triplet(q.d2b, q.d2a, q.d1b, m))


def classification_loss(
    mode: ModelMode,
    params: PromptParams,
    enc: EncoderWeights,
    image_feature: np.ndarray,
    label: int,
    class_ids: Sequence[int],
    tau: float = DEFAULT_TAU,
    pi: T.Tensor | None = None,
) -> T.Tensor:
    """Cross-entropy of one labelled image over the prompt-based logits."""
    class_ids = list(class_ids)
    if label not in class_ids:
        raise IndexError(f"label {label} not among the evaluated classes")
    logits = similarity_logits(mode, params, enc, image_feature, class_ids, tau, pi=pi)
    return T.softmax_cross_entropy(logits, class_ids.index(label))


def total_loss(ce: T.Tensor, adt: T.Tensor, w: LossWeights) -> T.Tensor:
    """alpha * adt + beta * ce."""
    return T.add(T.scale(adt, w.alpha), T.scale(ce, w.beta))
