"""Accuracy, harmonic mean, silhouette scores, token clouds and PCA projection."""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .augment import AugmentationKind, AugWeightTable, apply
from .encoders import EncoderWeights, encode_images
from .errors import ConfigError, DegenerateInputError
from .prompt import DEFAULT_TAU, ModelMode, PromptParams, predict


@dataclass
class Model:
    """A trained prompt learner bound to its frozen encoders."""

    mode: ModelMode
    params: PromptParams
    enc: EncoderWeights
    tau: float = DEFAULT_TAU


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, class_ids: Sequence[int]) -> float:
    """Fraction of images whose arg-max class (lowest id on ties) equals the label."""
    if len(class_ids) == 0:
        raise ConfigError("no classes to evaluate")
    if len(labels) == 0:
        raise ConfigError("empty evaluation set")
    feats = encode_images(model.enc, images)
    pred = predict(model.mode, model.params, model.enc, feats, class_ids)
    return float(np.mean(pred == np.asarray(labels)))


def harmonic_mean(base: float, new: float) -> float:
    """2ab / (a + b)."""
    if base + new == 0:
        raise DegenerateInputError("harmonic mean of two zeros")
    return 2.0 * base * new / (base + new)


# --- silhouette ---------------------------------------------------------------


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix with exactly rounded sums (order independent)."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    sq = (x[:, None, :] - x[None, :, :]) ** 2
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = math.sqrt(math.fsum(sq[i, j]))
    return out


def silhouette_samples(points: np.ndarray, labels: Sequence) -> np.ndarray:
    """Per-point silhouette (b - a) / max(a, b).

    a is the mean distance to the other members of the point's own cluster,
    b the smallest mean distance to another cluster. Members of singleton
    clusters score 0, as does a point with a == b == 0.
    """
    labels = np.asarray(labels)
    uniq = sorted(set(labels.tolist()))
    if len(uniq) < 2:
        raise DegenerateInputError("silhouette needs at least two clusters")
    dist = pairwise_distances(points)
    members = {c: np.flatnonzero(labels == c) for c in uniq}
    scores = np.zeros(len(labels))
    for i, c in enumerate(labels.tolist()):
        own = members[c]
        if len(own) == 1:
            continue
        a = math.fsum(dist[i, own]) / (len(own) - 1)
        b = min(math.fsum(dist[i, idx]) / len(idx) for k, idx in members.items() if k != c)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return scores


def silhouette_score(points: np.ndarray, labels: Sequence) -> tuple[np.ndarray, float]:
    """Per-point scores and their mean."""
    s = silhouette_samples(points, labels)
    return s, math.fsum(s) / len(s)


def per_label_means(scores: np.ndarray, labels: Sequence) -> dict:
    labels = np.asarray(labels)
    return {k: math.fsum(scores[labels == k]) / int(np.sum(labels == k)) for k in sorted(set(labels.tolist()))}


# --- token clouds ---------------------------------------------------------------


@dataclass
class TokenCloud:
    vectors: np.ndarray  # [n, d_e]
    kinds: np.ndarray  # augmentation codes
    class_ids: np.ndarray
    token_type: str  # "meta" | "delta"

    def __post_init__(self):
        if len(set(self.kinds.tolist())) < 2:
            raise DegenerateInputError("token cloud needs at least two augmentation kinds")

    def silhouette(self, by: str = "augmentation") -> tuple[np.ndarray, float]:
        labels = self.kinds if by == "augmentation" else self.class_ids
        return silhouette_score(self.vectors, labels)


def pca_2d(vectors: np.ndarray) -> np.ndarray:
    """Project onto the top two principal axes; sign fixed so each axis's largest loading is positive."""
    x = np.asarray(vectors, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    axes = vt[:2]
    flip = np.sign(axes[np.arange(len(axes)), np.argmax(np.abs(axes), axis=1)])
    flip[flip == 0] = 1.0
    out = x @ (axes * flip[:, None]).T
    if out.shape[1] < 2:
        out = np.c_[out, np.zeros(len(out))]
    return out


@dataclass
class AugmentationProfile:
    kinds: list[AugmentationKind]
    meta: TokenCloud
    delta: TokenCloud
    meta_per_kind: dict
    delta_per_kind: dict
    meta_mean: float
    delta_mean: float
    meta_xy: np.ndarray
    delta_xy: np.ndarray


def token_clouds(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    kinds: Sequence[AugmentationKind],
    seed: int,
) -> tuple[TokenCloud, TokenCloud]:
    """Meta token h(f(Aug_k(x))) and delta token h(f(Aug_k(x))) - h(f(x)) for each image.

    ``kinds`` gives the augmentation applied to each image.
    """
    rng = np.random.default_rng([seed, 0x7C])
    aug_seeds = rng.integers(0, 2**31, len(images))
    augmented = np.stack([apply(k, img, int(s)) for k, img, s in zip(kinds, images, aug_seeds)])
    net = model.params.metanet
    pi_orig = net.numpy_forward(encode_images(model.enc, images))
    pi_aug = net.numpy_forward(encode_images(model.enc, augmented))
    codes = np.array([-1 if k is None else int(k) for k in kinds])
    labels = np.asarray(labels)
    return (
        TokenCloud(pi_aug, codes, labels, "meta"),
        TokenCloud(pi_aug - pi_orig, codes, labels, "delta"),
    )


def augmentation_profile(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    n_points: int = 100,
    weights: AugWeightTable | None = None,
    seed: int = 0,
) -> AugmentationProfile:
    """Silhouette-by-augmentation of meta and delta tokens over ``n_points`` validation images.

    Kinds are dealt evenly over the bank's support (a shuffled round-robin)
    so every kind is represented.
    """
    if len(images) == 0:
        raise ConfigError("empty validation set")
    kinds = (weights or AugWeightTable()).support
    rng = np.random.default_rng([seed, 0x9F])
    idx = rng.choice(len(images), size=n_points, replace=n_points > len(images))
    dealt = [kinds[i % len(kinds)] for i in rng.permutation(n_points)]
    meta, delta = token_clouds(model, images[idx], np.asarray(labels)[idx], dealt, seed)

    def score(cloud):
        s, mean = cloud.silhouette("augmentation")
        per = per_label_means(s, cloud.kinds)
        return {AugmentationKind(k): v for k, v in per.items()}, mean

    meta_per, meta_mean = score(meta)
    delta_per, delta_mean = score(delta)
    return AugmentationProfile(
        list(kinds),
        meta,
        delta,
        meta_per,
        delta_per,
        meta_mean,
        delta_mean,
        pca_2d(meta.vectors),
        pca_2d(delta.vectors),
    )
